//! Box prompts as two corner tokens: random Fourier features of the
//! normalised corner position plus a learned per-corner embedding.

use std::f32::consts::PI;

use super::{Ctx, Model};
use crate::boxes::Box2D;
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// `[sin(2π u·G), cos(2π u·G)]` for points `u ∈ [-1, 1]²`; `gauss` is `2 × F`.
pub fn fourier_features(points: &[(f32, f32)], gauss: &Tensor) -> Result<Tensor> {
    let (two, f) = gauss.dims2()?;
    if two != 2 {
        return Err(Error::shape(format!("fourier basis must be 2×F, got {:?}", gauss.shape())));
    }
    let g = gauss.data();
    let mut out = Vec::with_capacity(points.len() * 2 * f);
    for &(x, y) in points {
        let proj: Vec<f32> = (0..f).map(|j| 2.0 * PI * (x * g[j] + y * g[f + j])).collect();
        out.extend(proj.iter().map(|v| v.sin()));
        out.extend(proj.iter().map(|v| v.cos()));
    }
    Tensor::new(vec![points.len(), 2 * f], out)
}

fn normalise(c: f32, size: usize) -> f32 {
    (c + 0.5) / size as f32 * 2.0 - 1.0
}

fn corner_features(model: &Model, b: Box2D) -> Result<Tensor> {
    let s = model.config().image_size;
    let pts = [(normalise(b.x1, s), normalise(b.y1, s)), (normalise(b.x2, s), normalise(b.y2, s))];
    fourier_features(&pts, model.param("prompt.pe_gauss")?)
}

/// Dense positional encoding of the encoder's token grid, `tokens × embed_dim`.
pub(super) fn dense_pe(model: &Model) -> Result<Tensor> {
    let g = model.config().grid();
    let pts: Vec<(f32, f32)> = (0..g * g).map(|i| (normalise((i % g) as f32, g), normalise((i / g) as f32, g))).collect();
    fourier_features(&pts, model.param("prompt.pe_gauss")?)
}

pub(super) fn forward(ctx: &mut Ctx, b: Box2D) -> Result<Var> {
    let pe = corner_features(ctx.model(), b)?;
    let pe = ctx.tape.constant(pe);
    let corner = ctx.param("prompt.corner")?;
    ctx.tape.add(pe, corner)
}

pub(super) fn encode(model: &Model, b: Box2D) -> Result<Tensor> {
    corner_features(model, b)?.add(model.param("prompt.corner")?)
}
