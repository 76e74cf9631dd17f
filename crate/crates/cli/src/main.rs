//! `qseg`: synthetic data, float pre-training, quantization-aware training,
//! evaluation, inference, model files and benchmarks.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "qseg", version, about = "Quantized promptable segmentation toolkit")]
pub struct Cli {
    /// TOML config file (flags take precedence over it).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; nothing is written outside it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (falls back to QSEG_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Single-threaded, order-fixed execution.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Override any config key, e.g. `--set train.schedule.initial_lr=0.02`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-modality volume container.
    GenData(GenDataArgs),
    /// Stage 0: train the float model.
    TrainFloat(TrainFloatArgs),
    /// Quantization-aware stages 1–3 (or one of them).
    Qat(QatArgs),
    /// Score a model (or the ground-truth oracle) on held-out volumes.
    Eval(EvalArgs),
    /// Segment one volume and write the masks as PNG files.
    Infer(InferArgs),
    /// Re-export a model file in float or quantized form.
    Export(ExportArgs),
    /// Summarise a model file.
    Inspect(InspectArgs),
    /// Time float vs integer inference.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// `default`, `imbalanced`, or a JSON spec file (its `seed` is replaced by the master seed).
    #[arg(long, default_value = "default")]
    pub spec: String,
    /// File name inside the output directory.
    #[arg(long, default_value = "data.qseg")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct TrainFloatArgs {
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct QatArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Stage-0 float model (default: `<out>/float.qsmf`).
    #[arg(long)]
    pub float: Option<PathBuf>,
    /// Run only this stage (1, 2 or 3).
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub stage: Option<u8>,
    /// Best checkpoint of the previous stage (default: `<out>/stage{N-1}.qsmf`).
    #[arg(long)]
    pub from: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, required_unless_present = "oracle")]
    pub model: Option<PathBuf>,
    /// Score the ground truth against itself instead of running a model.
    #[arg(long)]
    pub oracle: bool,
    /// Evaluate every volume rather than the held-out split.
    #[arg(long)]
    pub all: bool,
    /// At most this many volumes per modality.
    #[arg(long)]
    pub cap: Option<usize>,
    #[arg(long, value_parser = ["float", "integer"])]
    pub kernels: Option<String>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub volume: usize,
    #[arg(long, value_parser = ["float", "integer"])]
    pub kernels: Option<String>,
    /// Re-encode each slice for every box instead of caching embeddings.
    #[arg(long)]
    pub recompute: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_parser = ["float", "quantized"])]
    pub mode: String,
    /// File name inside the output directory.
    #[arg(long)]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    /// Held-out volumes per modality.
    #[arg(long, default_value_t = 1)]
    pub cap: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let overrides =
        Overrides { seed: cli.seed, out_dir: cli.out.clone(), threads: cli.threads, deterministic: cli.deterministic, set: cli.set.clone() };
    let result = RunConfig::load(cli.config.as_deref(), &overrides).and_then(|cfg| {
        eprintln!("# effective configuration\n{}", cfg.dump());
        let n = qseg_core::exec::init_threads(cfg.threads);
        log::info!("{} worker thread(s){}", n, if cfg.deterministic { ", deterministic" } else { "" });
        commands::run(&cli.command, &cfg)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let tag = e.module().map(|m| m.to_string()).unwrap_or_else(|| "io".into());
            let msg = e.to_string();
            if msg.starts_with(&format!("{tag}:")) {
                eprintln!("error: {msg}");
            } else {
                eprintln!("error: {tag}: {msg}");
            }
            ExitCode::from(1)
        }
    }
}
