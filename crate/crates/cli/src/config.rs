//! Run configuration: defaults, then a TOML file, then `--set` overrides,
//! then dedicated flags.

use std::path::{Path, PathBuf};

use qseg_core::inference::BatchLimits;
use qseg_core::model::ModelConfig;
use qseg_core::training::TrainConfig;
use qseg_core::{Error, Module, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every RNG stream downstream is derived from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub threads: Option<usize>,
    pub deterministic: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub limits: BatchLimits,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("qseg-out"),
            threads: None,
            deterministic: false,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            limits: BatchLimits::default(),
        }
    }
}

/// Flags that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub threads: Option<usize>,
    pub deterministic: bool,
    /// `dotted.key=value` pairs; values parse as TOML, falling back to strings.
    pub set: Vec<String>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::config(Module::Training, msg)
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| bad(format!("`--set {assignment}`: expected key=value")))?;
    let mut over = parse_value(raw.trim());
    for part in key.trim().rsplit('.') {
        if part.is_empty() {
            return Err(bad(format!("`--set {assignment}`: empty key segment")));
        }
        let mut t = toml::Table::new();
        t.insert(part.to_string(), over);
        over = toml::Value::Table(t);
    }
    merge(root, over);
    Ok(())
}

impl RunConfig {
    pub fn load(file: Option<&Path>, o: &Overrides) -> Result<RunConfig> {
        let mut value = toml::Value::try_from(RunConfig::default()).map_err(|e| bad(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            let parsed: toml::Table =
                toml::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))?;
            merge(&mut value, toml::Value::Table(parsed));
        }
        for s in &o.set {
            set_path(&mut value, s)?;
        }
        let mut cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| bad(e.to_string()))?;
        if let Some(s) = o.seed {
            cfg.seed = s;
        }
        if let Some(d) = &o.out_dir {
            cfg.out_dir = d.clone();
        }
        if o.threads.is_some() {
            cfg.threads = o.threads;
        }
        cfg.deterministic |= o.deterministic;
        cfg.model.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        cfg.train.sampler.seed = cfg.seed;
        cfg.train.deterministic = cfg.deterministic;
        cfg.model.validate()?;
        cfg.train.validate()?;
        cfg.limits.validate()?;
        Ok(cfg)
    }

    pub fn dump(&self) -> String {
        toml::to_string(self).unwrap_or_else(|e| format!("# unprintable config: {e}\n"))
    }

    /// A path inside the output directory. `name` must be a plain relative path.
    pub fn output(&self, name: &str) -> Result<PathBuf> {
        let p = Path::new(name);
        if p.is_absolute() || p.components().any(|c| !matches!(c, std::path::Component::Normal(_))) {
            return Err(bad(format!("output name `{name}` must stay inside the output directory")));
        }
        let full = self.out_dir.join(p);
        if let Some(parent) = full.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(full)
    }
}
