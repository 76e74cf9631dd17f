//! Two-way attention decoder with transposed-conv upscaling and a
//! hypernetwork mask head.

use super::{prompt, Ctx};
use crate::error::Result;
use crate::tensor::Var;

/// Per-image decoder inputs reused by every prompt.
pub(super) struct Shared {
    keys: Var,
    pe: Var,
}

impl Shared {
    pub(super) fn new(ctx: &mut Ctx, tokens: Var) -> Result<Shared> {
        let pe = prompt::dense_pe(ctx.model())?;
        let pe = ctx.tape.constant(pe);
        Ok(Shared { keys: tokens, pe })
    }
}

/// Mask logits `1 × S²` for one prompt (`2 × embed_dim`).
pub(super) fn forward(ctx: &mut Ctx, shared: &Shared, prompt: Var) -> Result<Var> {
    let cfg = ctx.model().config().clone();
    let heads = cfg.num_heads;
    let mask_token = ctx.param("dec.mask_token")?;
    let tokens = ctx.tape.concat_rows(&[mask_token, prompt])?;

    let a = ctx.attention(tokens, tokens, tokens, "dec.self", heads)?;
    let q = ctx.tape.add(tokens, a)?;
    let mut queries = ctx.layernorm(q, "dec.ln1")?;
    let mut keys = shared.keys;

    let qp = ctx.tape.add(queries, tokens)?;
    let kp = ctx.tape.add(keys, shared.pe)?;
    let a = ctx.attention(qp, kp, keys, "dec.t2i", heads)?;
    let q = ctx.tape.add(queries, a)?;
    queries = ctx.layernorm(q, "dec.ln2")?;

    let h = ctx.linear(queries, "dec.mlp.fc1")?;
    let h = ctx.tape.relu(h);
    let h = ctx.linear(h, "dec.mlp.fc2")?;
    let q = ctx.tape.add(queries, h)?;
    queries = ctx.layernorm(q, "dec.ln3")?;

    let qp = ctx.tape.add(queries, tokens)?;
    let a = ctx.attention(kp, qp, queries, "dec.i2t", heads)?;
    let k = ctx.tape.add(keys, a)?;
    keys = ctx.layernorm(k, "dec.ln4")?;

    let qp = ctx.tape.add(queries, tokens)?;
    let kp = ctx.tape.add(keys, shared.pe)?;
    let a = ctx.attention(qp, kp, keys, "dec.final", heads)?;
    let q = ctx.tape.add(queries, a)?;
    queries = ctx.layernorm(q, "dec.ln5")?;

    // Upscale image tokens back to input resolution.
    let g = cfg.grid();
    let (f1, f2) = cfg.upscale_factors();
    let (c1, c2) = cfg.upscale_channels();
    let x = ctx.tape.transpose(keys)?;
    let f = upscale(ctx, x, "dec.up1", c1, f1, g, g)?;
    let f = upscale(ctx, f, "dec.up2", c2, f2, g * f1, g * f1)?;

    let tok = ctx.tape.slice_rows(queries, 0, 1)?;
    let h = ctx.linear(tok, "dec.hyper.fc1")?;
    let h = ctx.tape.relu(h);
    let h = ctx.linear(h, "dec.hyper.fc2")?;
    ctx.mm(h, f, "dec.head.token", "dec.head.features")
}

/// Kernel = stride = `k` transposed conv on `c_in × (h·w)`, bias, GELU;
/// returns `c_out × (h·k·w·k)`.
fn upscale(ctx: &mut Ctx, x: Var, prefix: &str, c_out: usize, k: usize, h: usize, w: usize) -> Result<Var> {
    let wt = ctx.param(&format!("{prefix}.w"))?;
    let b = ctx.param(&format!("{prefix}.b"))?;
    let y = ctx.mm(wt, x, &format!("{prefix}.weight"), &format!("{prefix}.act"))?;
    let y = ctx.tape.pixel_shuffle(y, c_out, k, h, w)?;
    let y = ctx.tape.reshape(y, &[c_out, h * k * w * k])?;
    let y = ctx.tape.add_col(y, b)?;
    Ok(ctx.tape.gelu(y))
}
