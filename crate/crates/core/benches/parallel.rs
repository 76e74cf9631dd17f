//! Sequential vs rayon execution of the data-parallel hot loops.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qseg_core::boxes::{Box2D, Box3D};
use qseg_core::inference::{run_case, Case, RunOptions};
use qseg_core::model::{Ctx, Model, ModelConfig, Trainable};
use qseg_core::quant::int8_gemm_i32_with;
use qseg_core::tensor::{Tape, Tensor};
use qseg_core::Exec;

fn modes() -> Vec<(&'static str, Exec)> {
    vec![
        ("sequential", Exec::Sequential),
        #[cfg(feature = "parallel")]
        ("parallel", Exec::Parallel),
    ]
}

fn small_model() -> Model {
    Model::new(ModelConfig {
        image_size: 64,
        patch_size: 8,
        embed_dim: 32,
        encoder_depth: 2,
        num_heads: 4,
        decoder_dim: 32,
        mask_resolution: 64,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn int8_gemm(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (m, k, n) = (256, 256, 256);
    let a: Vec<i8> = (0..m * k).map(|_| rng.gen_range(-127..=127)).collect();
    let b: Vec<i8> = (0..k * n).map(|_| rng.gen_range(-127..=127)).collect();
    let mut g = c.benchmark_group("int8_gemm_256");
    for (name, exec) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| int8_gemm_i32_with(exec, m, k, n, black_box(&a), black_box(&b)))
        });
    }
    g.finish();
}

fn batch_gradients(c: &mut Criterion) {
    let model = small_model();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch: Vec<Tensor> = (0..4).map(|_| Tensor::from_fn(&[3, 64, 64], |_| rng.gen_range(0.0..1.0))).collect();
    let b = Box2D::new(8.0, 10.0, 40.0, 50.0);
    let mut g = c.benchmark_group("per_sample_backward_x4");
    g.sample_size(10);
    for (name, exec) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| {
                exec.map(&batch, |img| {
                    let mut ctx = Ctx::new(&model, Tape::new(), Trainable::all());
                    let out = ctx.forward(img, b).unwrap();
                    let l = ctx.tape.sum(out.logits);
                    ctx.tape.backward(l).unwrap().get(out.logits).map(|g| g.len())
                })
            })
        });
    }
    g.finish();
}

fn volume_inference(c: &mut Criterion) {
    let model = small_model();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let slices = (0..12).map(|_| Tensor::from_fn(&[1, 96, 96], |_| rng.gen_range(0.0..255.0))).collect();
    let boxes = vec![Box3D::new(10.0, 10.0, 0, 60.0, 60.0, 11), Box3D::new(30.0, 20.0, 2, 90.0, 70.0, 9)];
    let case = Case { id: "bench".into(), modality: "synthetic".into(), slices, boxes, ground_truth: None };
    let mut g = c.benchmark_group("run_case_12_slices");
    g.sample_size(10);
    for (name, exec) in modes() {
        let opts = RunOptions { exec, ..RunOptions::default() };
        g.bench_function(BenchmarkId::from_parameter(name), |bench| bench.iter(|| run_case(&model, &case, &opts).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, int8_gemm, batch_gradients, volume_inference);
criterion_main!(benches);
