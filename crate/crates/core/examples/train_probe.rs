//! Desk-scale training run on the default synthetic set (seed 7).
//!
//! `cargo run --release -p qseg-core --example train_probe`. Knobs via env:
//! IMG, PATCH, DIM, DEPTH, EVAL (eval volumes per modality), CAP (samples per
//! modality per epoch), BATCH, LR1000 (initial lr × 1000), QAT=1 to follow with
//! stages 1–3.

use std::time::Instant;

use qseg_core::dataset::synth::{generate, SynthSpec};
use qseg_core::dataset::VolumeStore;
use qseg_core::model::{Model, ModelConfig};
use qseg_core::training::{run_qat, train_float, TrainConfig, TrainData};

fn env(k: &str, d: usize) -> usize {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.qseg");
    let t = Instant::now();
    VolumeStore::write(&path, &generate(&SynthSpec::default_six(7)).unwrap()).unwrap();
    let store = VolumeStore::open(&path).unwrap();
    println!("data {:?}", t.elapsed());
    let mc = ModelConfig {
        image_size: env("IMG", 64),
        patch_size: env("PATCH", 8),
        embed_dim: env("DIM", 32),
        encoder_depth: env("DEPTH", 2),
        num_heads: 4,
        decoder_dim: env("DIM", 32),
        mask_resolution: env("IMG", 64),
        seed: 7,
        ..ModelConfig::default()
    };
    let mut cfg = TrainConfig { seed: 7, eval_cap_per_modality: Some(env("EVAL", 2)), ..TrainConfig::default() };
    cfg.sampler.max_per_modality = Some(env("CAP", 60));
    cfg.batch_sizes[0] = env("BATCH", 2);
    cfg.schedule.initial_lr = env("LR1000", 10) as f64 / 1000.0;
    let data = TrainData::new(&store, &cfg).unwrap();
    println!("eval cases {}", data.eval_cases.len());
    let m = Model::new(mc).unwrap();
    let t = Instant::now();
    let r = train_float(&m, &data, &cfg, &mut |l, _| {
        println!("{} {:.1}s", l.csv_row(), t.elapsed().as_secs_f64());
        Ok(())
    })
    .unwrap();
    println!("best {} {:.4}\n{}", r.best_epoch, r.best_dsc(), r.best_report.to_table());
    if env("QAT", 0) == 1 {
        let q = run_qat(&r.best, &r.best, &[1, 2, 3], &data, &cfg, &mut |l, _| {
            println!("{} {:.1}s", l.csv_row(), t.elapsed().as_secs_f64());
            Ok(())
        })
        .unwrap();
        println!("{}", q.report());
    }
}
