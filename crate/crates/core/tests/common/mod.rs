#![allow(dead_code)]

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qseg_core::dataset::synth::generate;
use qseg_core::dataset::{SynthSpec, VolumeStore};
use qseg_core::model::ModelConfig;
use qseg_core::tensor::Tensor;
use qseg_core::training::TrainConfig;

/// The six default modalities at a few volumes each and half resolution.
pub fn tiny_spec(seed: u64) -> SynthSpec {
    let mut spec = SynthSpec::default_six(seed);
    let slices = [40, 30, 20, 6, 6, 6];
    for (m, n) in spec.modalities.iter_mut().zip(slices) {
        m.slices = n;
        m.height /= 2;
        m.width /= 2;
        m.depth = m.depth.min(10);
    }
    spec
}

pub fn tiny_store(dir: &Path, seed: u64) -> VolumeStore {
    let path = dir.join("tiny.qseg");
    VolumeStore::write(&path, &generate(&tiny_spec(seed)).unwrap()).unwrap();
    VolumeStore::open(&path).unwrap()
}

pub fn tiny_model(seed: u64) -> ModelConfig {
    ModelConfig {
        image_size: 32,
        patch_size: 8,
        embed_dim: 16,
        encoder_depth: 1,
        num_heads: 2,
        decoder_dim: 16,
        mask_resolution: 32,
        seed,
        ..ModelConfig::default()
    }
}

/// Two-epoch schedule with small capped epochs.
pub fn tiny_train(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig { seed, eval_cap_per_modality: Some(1), eval_denominator: 3, ..TrainConfig::default() };
    cfg.schedule.warmup_epochs = 1;
    cfg.schedule.anneal_epochs = 2;
    cfg.sampler.max_per_modality = Some(4);
    cfg.sampler.seed = seed;
    cfg
}

pub fn random_tensor(seed: u64, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}
