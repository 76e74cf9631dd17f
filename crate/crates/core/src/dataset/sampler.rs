//! Per-epoch, per-modality sampling of 2D clips.

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use super::index::DatasetIndex;
use crate::error::{Error, Module, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Every modality contributes the size of the smallest one.
    Proposed,
    /// `max(⌊N_m / 10⌋, min_i N_i)` per modality.
    Ablation,
    /// Same total as `Proposed`, split in proportion to modality size.
    Proportional,
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proposed" => Ok(Strategy::Proposed),
            "ablation" => Ok(Strategy::Ablation),
            "proportional" => Ok(Strategy::Proportional),
            _ => Err(Error::config(Module::Dataset, format!("unknown sampling strategy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub strategy: Strategy,
    pub seed: u64,
    pub flip_prob: f64,
    /// Upper bound on samples per modality per epoch (`None` = formula value).
    pub max_per_modality: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { strategy: Strategy::Proposed, seed: 0, flip_prob: 0.5, max_per_modality: None }
    }
}

/// Samples per modality for the given modality sizes.
pub fn samples_per_modality(strategy: Strategy, sizes: &[usize]) -> Result<Vec<usize>> {
    let min = match sizes.iter().copied().min() {
        None => return Err(Error::config(Module::Dataset, "no modalities to sample from")),
        Some(0) => return Err(Error::config(Module::Dataset, "a modality has no slices")),
        Some(m) => m,
    };
    Ok(match strategy {
        Strategy::Proposed => vec![min; sizes.len()],
        Strategy::Ablation => sizes.iter().map(|&n| (n / 10).max(min)).collect(),
        Strategy::Proportional => proportional(min * sizes.len(), sizes),
    })
}

/// Largest-remainder apportionment of `budget` in proportion to `sizes`.
fn proportional(budget: usize, sizes: &[usize]) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let mut out: Vec<usize> = sizes.iter().map(|&n| budget * n / total).collect();
    let mut rem: Vec<(usize, usize)> = sizes.iter().enumerate().map(|(i, &n)| (budget * n % total, i)).collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = budget - out.iter().sum::<usize>();
    for &(_, i) in rem.iter().take(short) {
        out[i] += 1;
    }
    out
}

impl SamplerConfig {
    pub fn counts(&self, index: &DatasetIndex) -> Result<Vec<usize>> {
        let mut n = samples_per_modality(self.strategy, &index.sizes())?;
        if let Some(cap) = self.max_per_modality {
            if cap == 0 {
                return Err(Error::config(Module::Dataset, "max_per_modality must be >= 1"));
            }
            let base = samples_per_modality(Strategy::Proposed, &index.sizes())?[0].min(cap);
            n = match self.strategy {
                Strategy::Proportional => proportional(base * n.len(), &index.sizes()),
                _ => n.into_iter().map(|v| v.min(cap)).collect(),
            };
        }
        Ok(n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SampleRef {
    pub modality: usize,
    pub volume: usize,
    pub z: usize,
}

/// The shuffled sample list for one epoch. Within a modality samples are
/// drawn without replacement.
pub fn sample_epoch(cfg: &SamplerConfig, index: &DatasetIndex, epoch: u64) -> Result<Vec<SampleRef>> {
    let counts = cfg.counts(index)?;
    let mut r = rng::indexed_stream(cfg.seed, "sampler", epoch);
    let mut out = Vec::with_capacity(counts.iter().sum());
    for (m, ((_, idx), &n)) in index.modalities.iter().zip(&counts).enumerate() {
        let total = idx.total_slices();
        if n > total {
            return Err(Error::contract(Module::Dataset, format!("cannot draw {n} of {total} slices without replacement")));
        }
        for g in index::sample(&mut r, total, n).into_iter() {
            let (volume, z) = idx.locate(g)?;
            out.push(SampleRef { modality: m, volume, z });
        }
    }
    out.shuffle(&mut r);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_examples() {
        let n = samples_per_modality(Strategy::Ablation, &[1218411, 1646, 1000]).unwrap();
        assert_eq!(n, vec![121841, 1000, 1000]);
    }

    #[test]
    fn proportional_preserves_budget() {
        let n = samples_per_modality(Strategy::Proportional, &[2000, 600, 300, 40]).unwrap();
        assert_eq!(n.iter().sum::<usize>(), 160);
        assert!(n.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn empty_modality_is_a_config_error() {
        assert!(matches!(samples_per_modality(Strategy::Proposed, &[3, 0]), Err(Error::Config { .. })));
        assert!(samples_per_modality(Strategy::Proposed, &[]).is_err());
    }
}
