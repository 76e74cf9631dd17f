//! Segmentation and distillation losses with analytic gradients.
//!
//! Every loss returns its value (accumulated in f64) together with the
//! gradient with respect to its first argument.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Module, Result};

const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub dice_smooth: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dice_weight: f64,
    pub focal_weight: f64,
    pub distill_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            dice_smooth: 1.0,
            focal_gamma: 2.0,
            focal_alpha: 1.0,
            dice_weight: 1.0,
            focal_weight: 1.0,
            distill_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let vals = [self.dice_smooth, self.focal_gamma, self.focal_alpha, self.dice_weight, self.focal_weight, self.distill_weight];
        if vals.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::config(Module::Losses, "loss weights, smoothing and gamma must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f32>,
}

fn check(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("loss inputs have {a} and {b} elements")));
    }
    if a == 0 {
        return Err(Error::contract(Module::Losses, "loss on empty input"));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)`, computed without overflow.
fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// `1 − (2Σpt + s)/(Σp + Σt + s)` with `p = σ(logits)`.
pub fn dice_loss(logits: &[f32], target: &[u8], smooth: f64) -> Result<LossValue> {
    check(logits.len(), target.len())?;
    let p: Vec<f64> = logits.iter().map(|&l| sigmoid(l as f64)).collect();
    let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
    for (&pi, &ti) in p.iter().zip(target) {
        let t = (ti != 0) as u8 as f64;
        inter += pi * t;
        sp += pi;
        st += t;
    }
    let num = 2.0 * inter + smooth;
    let den = sp + st + smooth;
    let value = 1.0 - num / den;
    let grad = p
        .iter()
        .zip(target)
        .map(|(&pi, &ti)| {
            let t = (ti != 0) as u8 as f64;
            let dp = -(2.0 * t * den - num) / (den * den);
            (dp * pi * (1.0 - pi)) as f32
        })
        .collect();
    Ok(LossValue { value, grad })
}

/// Mean of `−α (1 − p_t)^γ ln p_t`, with `ln` floored at `ln 1e-12`.
pub fn focal_loss(logits: &[f32], target: &[u8], gamma: f64, alpha: f64) -> Result<LossValue> {
    check(logits.len(), target.len())?;
    let n = logits.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&l, &t) in logits.iter().zip(target) {
        // p_t = σ(±l)
        let sgn = if t != 0 { 1.0 } else { -1.0 };
        let z = sgn * l as f64;
        let q = sigmoid(z);
        let logq = log_sigmoid(z).max(LOG_FLOOR.ln());
        let omq = 1.0 - q;
        total += -alpha * omq.powf(gamma) * logq;
        // d/dl of the per-pixel term, using dq/dl = ±q(1−q).
        let d = -alpha * (-gamma * omq.powf(gamma) * q * logq + omq.powf(gamma + 1.0));
        grad.push((sgn * d / n) as f32);
    }
    Ok(LossValue { value: total / n, grad })
}

/// `MSE(s, t) · Σmin(|s|,|t|) / Σmax(|s|,|t|)`, gradient with respect to `s`.
pub fn distill_loss(student: &[f32], teacher: &[f32]) -> Result<LossValue> {
    check(student.len(), teacher.len())?;
    let n = student.len() as f64;
    let (mut se, mut inter, mut union) = (0.0, 0.0, 0.0);
    for (&s, &t) in student.iter().zip(teacher) {
        let (s, t) = (s as f64, t as f64);
        se += (s - t) * (s - t);
        inter += s.abs().min(t.abs());
        union += s.abs().max(t.abs());
    }
    let mse = se / n;
    let union_f = union.max(1e-12);
    let iou = inter / union_f;
    let grad = student
        .iter()
        .zip(teacher)
        .map(|(&s, &t)| {
            let (s, t) = (s as f64, t as f64);
            let dmse = 2.0 * (s - t) / n;
            let sg = if s > 0.0 {
                1.0
            } else if s < 0.0 {
                -1.0
            } else {
                0.0
            };
            let (da, db) = if s.abs() < t.abs() { (sg, 0.0) } else { (0.0, sg) };
            let diou = if union > 1e-12 { (da * union - inter * db) / (union * union) } else { da / union_f };
            (dmse * iou + mse * diou) as f32
        })
        .collect();
    Ok(LossValue { value: mse * iou, grad })
}

/// Weighted Dice + focal loss on mask logits.
pub fn compound(logits: &[f32], target: &[u8], cfg: &LossConfig) -> Result<LossValue> {
    let mut value = 0.0;
    let mut grad = vec![0.0f32; logits.len()];
    check(logits.len(), target.len())?;
    for (w, part) in [
        (cfg.dice_weight, if cfg.dice_weight > 0.0 { Some(dice_loss(logits, target, cfg.dice_smooth)?) } else { None }),
        (
            cfg.focal_weight,
            if cfg.focal_weight > 0.0 { Some(focal_loss(logits, target, cfg.focal_gamma, cfg.focal_alpha)?) } else { None },
        ),
    ] {
        if let Some(p) = part {
            value += w * p.value;
            for (g, pg) in grad.iter_mut().zip(&p.grad) {
                *g += (w * *pg as f64) as f32;
            }
        }
    }
    Ok(LossValue { value, grad })
}
