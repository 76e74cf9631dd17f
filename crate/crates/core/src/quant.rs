//! 8-bit symmetric per-tensor quantization.
//!
//! The fake-quant forward is `s·clamp(round(x/s), −127, 127)` with rounding
//! half away from zero. Backward uses the straight-through estimator for `x`
//! and the learned-step-size rule for `s`:
//!
//! ```text
//! ∂ŷ/∂s = round(x/s) − x/s   inside the clip range
//!       = −127 / +127        below / above it
//! ```
//!
//! with the scale gradient multiplied by `1/√(N·127)`.
//!
//! The integer path ([`int8_matmul`]) accumulates `i8·i8` products in `i32`
//! and applies `scale_a·scale_b` once at the end.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Module, Result};
use crate::exec::Exec;
use crate::tensor::Tensor;

pub const BIT_WIDTH: u8 = 8;
pub const Q_MAX: i32 = 127;
pub const SCALE_FLOOR: f32 = 1e-8;

/// Integer lattice coordinate of `x` under scale `s`, as an `f32`.
#[inline]
pub fn lattice(x: f32, s: f32, q_max: f32) -> f32 {
    (x / s).round().clamp(-q_max, q_max)
}

/// Learned-scale gradient normalisation for a tensor of `n` elements.
pub fn lsq_grad_factor(n: usize, q_max: i32) -> f32 {
    1.0 / ((n.max(1) as f32) * q_max as f32).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizerState {
    pub scale: f32,
    pub bit_width: u8,
    pub signed: bool,
    pub calibrated: bool,
    pub q_max: i32,
}

impl Default for QuantizerState {
    fn default() -> Self {
        QuantizerState { scale: 1.0, bit_width: BIT_WIDTH, signed: true, calibrated: false, q_max: Q_MAX }
    }
}

impl QuantizerState {
    pub fn new() -> Self {
        Self::default()
    }

    /// A calibrated state with a fixed scale.
    pub fn with_scale(scale: f32) -> Self {
        QuantizerState { scale: scale.max(SCALE_FLOOR), calibrated: true, ..Self::default() }
    }

    pub fn q_min(&self) -> i32 {
        -self.q_max
    }

    /// Initialise the scale from `max|sample| / q_max`. Only the first call
    /// has an effect.
    pub fn calibrate(&mut self, sample: &Tensor) -> Result<()> {
        if sample.numel() == 0 {
            return Err(Error::contract(Module::Quant, "calibration sample is empty"));
        }
        self.calibrate_from_max_abs(sample.max_abs());
        Ok(())
    }

    pub fn calibrate_from_max_abs(&mut self, max_abs: f32) {
        if self.calibrated {
            return;
        }
        if max_abs == 0.0 {
            log::warn!("quantizer calibrated on an all-zero sample; scale floored at {SCALE_FLOOR}");
        }
        self.scale = (max_abs / self.q_max as f32).max(SCALE_FLOOR);
        self.calibrated = true;
    }

    fn require_calibrated(&self) -> Result<()> {
        if !self.calibrated {
            return Err(Error::contract(Module::Quant, "quantizer used before calibration"));
        }
        Ok(())
    }

    pub fn fake_quant(&self, x: &Tensor) -> Result<Tensor> {
        self.require_calibrated()?;
        let (s, q) = (self.scale, self.q_max as f32);
        Ok(x.map(|v| s * lattice(v, s, q)))
    }

    /// `(grad_x, grad_scale)` for upstream gradient `upstream` at input `x`.
    /// `grad_scale` already carries the `1/√(N·q_max)` factor.
    pub fn fake_quant_backward(&self, x: &Tensor, upstream: &Tensor) -> Result<(Tensor, f32)> {
        crate::tensor::same_shape(x, upstream)?;
        let (s, q) = (self.scale, self.q_max as f32);
        let mut gx = Vec::with_capacity(x.numel());
        let mut gs = 0.0f64;
        for (&xv, &u) in x.data().iter().zip(upstream.data()) {
            let v = xv / s;
            let local = if v < -q {
                gx.push(0.0);
                -q
            } else if v > q {
                gx.push(0.0);
                q
            } else {
                gx.push(u);
                v.round() - v
            };
            gs += u as f64 * local as f64;
        }
        let gs = gs as f32 * lsq_grad_factor(x.numel(), self.q_max);
        Ok((Tensor::new(x.shape().to_vec(), gx)?, gs))
    }

    pub fn quantize_int(&self, x: &Tensor) -> Result<QuantTensor> {
        self.require_calibrated()?;
        let (s, q) = (self.scale, self.q_max as f32);
        Ok(QuantTensor {
            q: x.data().iter().map(|&v| lattice(v, s, q) as i8).collect(),
            scale: s,
            shape: x.shape().to_vec(),
        })
    }
}

/// 8-bit tensor with one scale: `value = q·scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    pub q: Vec<i8>,
    pub scale: f32,
    pub shape: Vec<usize>,
}

impl QuantTensor {
    pub fn new(shape: Vec<usize>, q: Vec<i8>, scale: f32) -> Result<Self> {
        if shape.iter().product::<usize>() != q.len() {
            return Err(Error::shape(format!("quant tensor shape {shape:?} vs {} values", q.len())));
        }
        if q.iter().any(|&v| v == i8::MIN) {
            return Err(Error::contract(Module::Quant, "value -128 outside the symmetric range"));
        }
        Ok(QuantTensor { q, scale, shape })
    }

    pub fn numel(&self) -> usize {
        self.q.len()
    }
}

pub fn quantize_int(state: &QuantizerState, x: &Tensor) -> Result<QuantTensor> {
    state.quantize_int(x)
}

pub fn dequantize(qt: &QuantTensor) -> Tensor {
    Tensor::new(qt.shape.clone(), qt.q.iter().map(|&v| v as f32 * qt.scale).collect())
        .expect("QuantTensor shape invariant")
}

/// Largest inner extent for which `|Σ q_a·q_b|` stays below 2³¹.
pub const MAX_INT_K: usize = 1 << 16;

fn int8_row(a_row: &[i8], b: &[i8], n: usize, out: &mut [i32]) {
    for (p, &av) in a_row.iter().enumerate() {
        if av == 0 {
            continue;
        }
        let av = av as i32;
        let brow = &b[p * n..(p + 1) * n];
        for (o, &bv) in out.iter_mut().zip(brow) {
            *o += av * bv as i32;
        }
    }
}

/// Raw `i32` accumulators of an m×k by k×n product of 8-bit matrices.
pub fn int8_gemm_i32(m: usize, k: usize, n: usize, a: &[i8], b: &[i8]) -> Vec<i32> {
    int8_gemm_i32_with(Exec::Sequential, m, k, n, a, b)
}

pub fn int8_gemm_i32_with(exec: Exec, m: usize, k: usize, n: usize, a: &[i8], b: &[i8]) -> Vec<i32> {
    assert!(k <= MAX_INT_K, "int8 gemm inner extent {k} exceeds {MAX_INT_K}");
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut out = vec![0i32; m * n];
    if n == 0 {
        return out;
    }
    exec.for_each_chunk_mut(&mut out, n, |i, row| int8_row(&a[i * k..(i + 1) * k], b, n, row));
    out
}

pub fn int8_matmul(a: &QuantTensor, b: &QuantTensor) -> Result<Tensor> {
    int8_matmul_with(Exec::Sequential, a, b)
}

/// `(scale_a·scale_b)·(Σ q_a·q_b)` with `i32` accumulation.
pub fn int8_matmul_with(exec: Exec, a: &QuantTensor, b: &QuantTensor) -> Result<Tensor> {
    let (m, k) = match a.shape[..] {
        [m, k] => (m, k),
        _ => return Err(Error::shape(format!("int8_matmul lhs must be rank 2, got {:?}", a.shape))),
    };
    let (k2, n) = match b.shape[..] {
        [k, n] => (k, n),
        _ => return Err(Error::shape(format!("int8_matmul rhs must be rank 2, got {:?}", b.shape))),
    };
    if k != k2 {
        return Err(Error::shape(format!("int8_matmul inner extents {k} vs {k2}")));
    }
    if k > MAX_INT_K {
        return Err(Error::contract(Module::Quant, format!("inner extent {k} would overflow i32 accumulation")));
    }
    let prod = a.scale * b.scale;
    let acc = int8_gemm_i32_with(exec, m, k, n, &a.q, &b.q);
    Tensor::new(vec![m, n], acc.into_iter().map(|v| v as f32 * prod).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn t1(v: &[f32]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn calibrate_rules() {
        let mut s = QuantizerState::new();
        s.calibrate(&t1(&[-12.7, 3.0])).unwrap();
        assert!((s.scale - 0.1).abs() < 1e-7);
        s.calibrate(&t1(&[1000.0])).unwrap();
        assert!((s.scale - 0.1).abs() < 1e-7, "first batch wins");

        let mut z = QuantizerState::new();
        z.calibrate(&t1(&[0.0, 0.0])).unwrap();
        assert_eq!(z.scale, SCALE_FLOOR);

        let mut one = QuantizerState::new();
        one.calibrate(&t1(&[127.0])).unwrap();
        assert_eq!(one.scale, 1.0);

        assert!(QuantizerState::new().calibrate(&Tensor::zeros(&[0])).is_err());
    }

    #[test]
    fn fake_quant_examples() {
        let s = QuantizerState::with_scale(0.1);
        let y = s.fake_quant(&t1(&[0.0, 0.34, 100.0, -100.0])).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 0.3).abs() < 1e-6);
        assert!((y.data()[2] - 12.7).abs() < 1e-5);
        assert!((y.data()[3] + 12.7).abs() < 1e-5);
        assert!(QuantizerState::new().fake_quant(&t1(&[1.0])).is_err());
    }

    #[test]
    fn half_away_from_zero() {
        let s = QuantizerState::with_scale(0.5);
        let q = s.quantize_int(&t1(&[0.25, -0.25, 0.75])).unwrap();
        assert_eq!(q.q, vec![1, -1, 2]);
        let tenth = QuantizerState::with_scale(0.1).quantize_int(&t1(&[0.05])).unwrap();
        // 0.05f32 / 0.1f32 rounds to exactly 0.5 in f32
        assert_eq!(tenth.q, vec![1]);
        assert!((dequantize(&tenth).data()[0] - 0.1).abs() < 1e-7);
    }

    #[test]
    fn ste_backward() {
        let s = QuantizerState::with_scale(0.1);
        let x = t1(&[0.05, 0.33, 100.0, -100.0]);
        let up = t1(&[1.0, 2.0, 3.0, 4.0]);
        let (gx, _) = s.fake_quant_backward(&x, &up).unwrap();
        assert_eq!(gx.data(), &[1.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn lattice_round_trip_exact() {
        let s = QuantizerState::with_scale(0.25);
        let x = Tensor::from_fn(&[255], |i| (i as i32 - 127) as f32 * 0.25);
        assert_eq!(dequantize(&s.quantize_int(&x).unwrap()), x);
    }

    #[test]
    fn int8_matmul_small() {
        let a = QuantTensor::new(vec![1, 1], vec![3], 0.1).unwrap();
        let b = QuantTensor::new(vec![1, 1], vec![5], 0.2).unwrap();
        let c = int8_matmul(&a, &b).unwrap();
        assert!((c.data()[0] - 0.3).abs() < 1e-6);
        assert!(QuantTensor::new(vec![1], vec![-128], 1.0).is_err());
    }

    #[test]
    fn int8_identity_pattern() {
        // a = I with scale 1 reproduces dequantized b
        let n = 5;
        let a = QuantTensor::new(vec![n, n], (0..n * n).map(|i| (i % (n + 1) == 0) as i8).collect(), 1.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let b = QuantTensor::new(vec![n, 3], (0..n * 3).map(|_| rng.gen_range(-127..=127)).collect(), 0.37).unwrap();
        assert_eq!(int8_matmul(&a, &b).unwrap(), dequantize(&b));
    }

    #[test]
    fn int8_matches_float_path() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let (m, k, n) = (rng.gen_range(1..=32), rng.gen_range(1..=64), rng.gen_range(1..=32));
            let qa = QuantTensor::new(vec![m, k], (0..m * k).map(|_| rng.gen_range(-127..=127)).collect(), 0.008).unwrap();
            let qb = QuantTensor::new(vec![k, n], (0..k * n).map(|_| rng.gen_range(-127..=127)).collect(), 0.007).unwrap();
            let got = int8_matmul_with(Exec::default(), &qa, &qb).unwrap();
            let want = crate::tensor::matmul(&dequantize(&qa), &dequantize(&qb)).unwrap();
            for (g, w) in got.data().iter().zip(want.data()) {
                assert!((g - w).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn lsq_factor() {
        assert!((lsq_grad_factor(127, 127) - 1.0 / 127.0).abs() < 1e-9);
    }
}
