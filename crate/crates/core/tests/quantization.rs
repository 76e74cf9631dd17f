use proptest::prelude::*;

use qseg_core::quant::{dequantize, int8_gemm_i32, int8_matmul, lsq_grad_factor, QuantTensor, QuantizerState, Q_MAX};
use qseg_core::tensor::Tensor;
use qseg_core::Exec;

/// Reference quantizer in f64, rounding half away from zero.
fn reference(x: f32, s: f32) -> f64 {
    let v = x as f64 / s as f64;
    let r = if v >= 0.0 { (v + 0.5).floor() } else { (v - 0.5).ceil() };
    r.clamp(-127.0, 127.0) * s as f64
}

proptest! {
    #[test]
    fn error_within_half_step_inside_range(s in 1e-3f32..10.0, u in -1.0f32..1.0) {
        let x = u * 127.0 * s;
        let q = QuantizerState::with_scale(s);
        let y = q.fake_quant(&Tensor::scalar(x)).unwrap().data()[0];
        prop_assert!((y as f64 - x as f64).abs() <= s as f64 * 0.5 * (1.0 + 1e-5));
    }

    #[test]
    fn odd_symmetry_and_clamp(s in 1e-3f32..10.0, x in -5000.0f32..5000.0) {
        let q = QuantizerState::with_scale(s);
        let t = Tensor::new(vec![2], vec![x, -x]).unwrap();
        let y = q.fake_quant(&t).unwrap();
        prop_assert_eq!(y.data()[1], -y.data()[0]);
        prop_assert!(y.data()[0].abs() <= 127.0 * s * (1.0 + 1e-6));
    }

    #[test]
    fn lattice_matches_reference(s in 1e-2f32..4.0, x in -600.0f32..600.0) {
        let q = QuantizerState::with_scale(s);
        let int = q.quantize_int(&Tensor::scalar(x)).unwrap();
        let expect = reference(x, s);
        prop_assert!((int.q[0] as f64 * s as f64 - expect).abs() <= s as f64 * 1e-4);
    }

    #[test]
    fn fake_quant_is_idempotent(s in 1e-3f32..5.0, x in -1000.0f32..1000.0) {
        let q = QuantizerState::with_scale(s);
        let once = q.fake_quant(&Tensor::scalar(x)).unwrap();
        let twice = q.fake_quant(&once).unwrap();
        prop_assert_eq!(once.data()[0], twice.data()[0]);
    }

    #[test]
    fn ste_passes_in_range_and_blocks_outside(s in 1e-2f32..2.0, x in -400.0f32..400.0, u in -3.0f32..3.0) {
        let q = QuantizerState::with_scale(s);
        let (gx, gs) = q.fake_quant_backward(&Tensor::scalar(x), &Tensor::scalar(u)).unwrap();
        let v = x / s;
        let norm = lsq_grad_factor(1, Q_MAX);
        if v.abs() <= 127.0 {
            prop_assert_eq!(gx.data()[0], u);
            prop_assert!((gs - u * (v.round() - v) * norm).abs() <= 1e-5 * (1.0 + u.abs()));
        } else {
            prop_assert_eq!(gx.data()[0], 0.0);
            prop_assert!((gs - u * 127.0 * v.signum() * norm).abs() <= 1e-4 * (1.0 + u.abs()) * 127.0);
        }
    }

    #[test]
    fn int8_matmul_equals_exact_integer_product(
        (m, k, n, a, b) in (1usize..6, 1usize..9, 1usize..6).prop_flat_map(|(m, k, n)| (
            Just(m), Just(k), Just(n),
            proptest::collection::vec(-127i8..=127, m * k),
            proptest::collection::vec(-127i8..=127, k * n),
        )),
        sa in 1e-3f32..1.0,
        sb in 1e-3f32..1.0,
    ) {
        let acc = int8_gemm_i32(m, k, n, &a, &b);
        for i in 0..m {
            for j in 0..n {
                let want: i64 = (0..k).map(|p| a[i * k + p] as i64 * b[p * n + j] as i64).sum();
                prop_assert_eq!(acc[i * n + j] as i64, want);
            }
        }
        let ta = QuantTensor::new(vec![m, k], a.clone(), sa).unwrap();
        let tb = QuantTensor::new(vec![k, n], b.clone(), sb).unwrap();
        let y = int8_matmul(&ta, &tb).unwrap();
        for (o, &v) in y.data().iter().zip(&acc) {
            let want = (sa * sb) as f64 * v as f64;
            prop_assert!((*o as f64 - want).abs() <= 1e-6 * (1.0 + want.abs()));
        }
    }
}

#[test]
fn calibration_sets_scale_from_max_abs_once() {
    let mut q = QuantizerState::new();
    assert!(q.fake_quant(&Tensor::scalar(1.0)).is_err());
    q.calibrate(&Tensor::new(vec![3], vec![0.5, -2.54, 1.0]).unwrap()).unwrap();
    assert_eq!(q.scale, 2.54 / 127.0);
    q.calibrate(&Tensor::new(vec![1], vec![100.0]).unwrap()).unwrap();
    assert_eq!(q.scale, 2.54 / 127.0);
}

#[test]
fn dequantize_round_trips_lattice_values() {
    let q = QuantizerState::with_scale(0.25);
    let x = Tensor::new(vec![2, 2], vec![0.25, -31.75, 10.0, 0.0]).unwrap();
    assert_eq!(dequantize(&q.quantize_int(&x).unwrap()), x);
}

#[test]
fn rejects_out_of_range_code() {
    assert!(QuantTensor::new(vec![1], vec![i8::MIN], 1.0).is_err());
    assert!(QuantTensor::new(vec![2], vec![1], 1.0).is_err());
}

#[test]
fn sequential_and_parallel_gemm_agree() {
    let a: Vec<i8> = (0..64 * 48).map(|i| ((i * 37 % 255) as i32 - 127) as i8).collect();
    let b: Vec<i8> = (0..48 * 40).map(|i| ((i * 91 % 255) as i32 - 127) as i8).collect();
    let seq = qseg_core::quant::int8_gemm_i32_with(Exec::Sequential, 64, 48, 40, &a, &b);
    let par = qseg_core::quant::int8_gemm_i32_with(Exec::select(false), 64, 48, 40, &a, &b);
    assert_eq!(seq, par);
}
