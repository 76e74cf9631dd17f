use super::Ctx;
use crate::error::Result;
use crate::tensor::{ConvGeom, Tensor, Var};

/// `3×S×S` image → `tokens × embed_dim`.
pub(super) fn forward(ctx: &mut Ctx, image: Var) -> Result<Var> {
    let cfg = ctx.model().config().clone();
    let (s, p, d) = (cfg.image_size, cfg.patch_size, cfg.embed_dim);
    let geom = ConvGeom::new(3, s, s, p, p, 0)?;
    let w = ctx.param("enc.patch.w")?;
    let w = ctx.tape.reshape(w, &[d, 3 * p * p])?;
    let b = ctx.param("enc.patch.b")?;

    // The input quantizer acts on the image itself, before unfolding.
    let (wn, xn) = ("enc.patch.weight", "enc.patch.act");
    let y = match ctx.quantize_pair(w, image, wn, xn)? {
        Some(((qw, sw), (qx, sx))) => {
            let cols = ctx.tape.im2col(qx, geom)?;
            ctx.tape.qmatmul(qw, cols, sw, sx)?
        }
        None => {
            let cols = ctx.tape.im2col(image, geom)?;
            ctx.tape.matmul(w, cols)?
        }
    };
    let y = ctx.tape.add_col(y, b)?;
    let mut x = ctx.tape.transpose(y)?;
    let pos = ctx.tape.constant(sincos_2d(cfg.grid(), d));
    x = ctx.tape.add(x, pos)?;

    for i in 0..cfg.encoder_depth {
        let pre = format!("enc.b{i}");
        let h = ctx.layernorm(x, &format!("{pre}.ln1"))?;
        let a = ctx.attention(h, h, h, &format!("{pre}.attn"), cfg.num_heads)?;
        x = ctx.tape.add(x, a)?;
        let h = ctx.layernorm(x, &format!("{pre}.ln2"))?;
        let h = ctx.linear(h, &format!("{pre}.mlp.fc1"))?;
        let h = ctx.tape.gelu(h);
        let h = ctx.linear(h, &format!("{pre}.mlp.fc2"))?;
        x = ctx.tape.add(x, h)?;
    }
    ctx.layernorm(x, "enc.neck")
}

/// Fixed `grid²×dim` position code: per token `[sin rω, cos rω, sin cω, cos cω]`
/// with `ω_k = 10000^(−k/(dim/4))`.
pub(super) fn sincos_2d(grid: usize, dim: usize) -> Tensor {
    let quarter = dim / 4;
    Tensor::from_fn(&[grid * grid, dim], |i| {
        let (t, j) = (i / dim, i % dim);
        let (part, k) = (j / quarter, j % quarter);
        let coord = if part < 2 { t / grid } else { t % grid } as f32;
        let a = coord * 10000f32.powf(-(k as f32) / quarter as f32);
        if part % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}
