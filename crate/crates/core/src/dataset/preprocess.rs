//! Resize / pad / normalise and flip augmentation.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::container::Slice;
use crate::boxes::Box2D;
use crate::error::{Error, Module, Result};
use crate::rng::Rng;
use crate::tensor::{bilinear_resize, Tensor};

/// Geometry of one preprocessing call, for mapping coordinates and masks
/// between original and model-input pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transform {
    pub orig_h: usize,
    pub orig_w: usize,
    pub resized_h: usize,
    pub resized_w: usize,
    pub target: usize,
}

impl Transform {
    pub fn new(orig_h: usize, orig_w: usize, target: usize) -> Result<Transform> {
        if orig_h == 0 || orig_w == 0 || target == 0 {
            return Err(Error::shape("preprocess on an empty image"));
        }
        let long = orig_h.max(orig_w);
        // round half up of short·target/long
        let fit = |n: usize| ((2 * n * target + long) / (2 * long)).clamp(1, target);
        Ok(Transform { orig_h, orig_w, resized_h: fit(orig_h), resized_w: fit(orig_w), target })
    }

    pub fn scale(&self) -> f32 {
        self.target as f32 / self.orig_h.max(self.orig_w) as f32
    }

    pub fn pad_bottom(&self) -> usize {
        self.target - self.resized_h
    }

    pub fn pad_right(&self) -> usize {
        self.target - self.resized_w
    }

    /// Map a box from original to model-input pixels.
    pub fn box_to_model(&self, b: Box2D) -> Box2D {
        b.scaled(self.scale()).clamped(self.target, self.target)
    }

    /// Nearest-neighbour map of an `orig_h × orig_w` mask into the padded
    /// `target × target` frame.
    pub fn mask_to_model(&self, mask: &[u8]) -> Result<Vec<u8>> {
        if mask.len() != self.orig_h * self.orig_w {
            return Err(Error::contract(Module::Dataset, "mask does not match transform geometry"));
        }
        let resized = nearest(mask, self.orig_h, self.orig_w, self.resized_h, self.resized_w);
        let mut out = vec![0u8; self.target * self.target];
        for y in 0..self.resized_h {
            out[y * self.target..][..self.resized_w].copy_from_slice(&resized[y * self.resized_w..][..self.resized_w]);
        }
        Ok(out)
    }
}

/// Nearest-neighbour resize with half-pixel centres.
pub fn nearest(src: &[u8], h: usize, w: usize, oh: usize, ow: usize) -> Vec<u8> {
    let map = |o: usize, n_in: usize, n_out: usize| (((2 * o + 1) * n_in) / (2 * n_out)).min(n_in - 1);
    let xs: Vec<usize> = (0..ow).map(|x| map(x, w, ow)).collect();
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let row = &src[map(y, h, oh) * w..][..w];
        out.extend(xs.iter().map(|&x| row[x]));
    }
    out
}

/// Convert an interleaved u8 slice to a float `C × H × W` tensor.
pub fn slice_to_tensor(s: &Slice) -> Result<Tensor> {
    let (h, w, c) = (s.height, s.width, s.channels);
    let mut data = vec![0.0; c * h * w];
    for (i, px) in s.data.chunks_exact(c).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            data[ch * h * w + i] = v as f32;
        }
    }
    Tensor::new(vec![c, h, w], data)
}

/// `C×H×W` image (C = 1 or 3) → `3 × target × target` model input.
pub fn preprocess(image: &Tensor, target: usize) -> Result<(Tensor, Transform)> {
    let (c, h, w) = match image.shape()[..] {
        [c, h, w] if c == 1 || c == 3 => (c, h, w),
        _ => return Err(Error::shape(format!("preprocess expects 1×H×W or 3×H×W, got {:?}", image.shape()))),
    };
    let t = Transform::new(h, w, target)?;
    let rgb = if c == 1 {
        let mut d = Vec::with_capacity(3 * h * w);
        for _ in 0..3 {
            d.extend_from_slice(image.data());
        }
        Tensor::new(vec![3, h, w], d)?
    } else {
        image.clone()
    };
    let resized =
        if (t.resized_h, t.resized_w) == (h, w) { rgb } else { bilinear_resize(&rgb, t.resized_h, t.resized_w)? };
    let (lo, hi) = resized.data().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = hi - lo;
    let (rh, rw) = (t.resized_h, t.resized_w);
    let mut out = vec![0.0; 3 * target * target];
    if range > 0.0 {
        for ch in 0..3 {
            for y in 0..rh {
                let src = &resized.data()[(ch * rh + y) * rw..][..rw];
                let dst = &mut out[(ch * target + y) * target..][..rw];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = (s - lo) / range;
                }
            }
        }
    }
    Ok((Tensor::new(vec![3, target, target], out)?, t))
}

/// Independent horizontal / vertical flips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Flips {
    pub horizontal: bool,
    pub vertical: bool,
}

impl Flips {
    pub fn draw(rng: &mut Rng, p: f64) -> Flips {
        Flips { horizontal: rng.gen_bool(p), vertical: rng.gen_bool(p) }
    }

    /// Flip each `h × w` plane of a row-major buffer in place.
    pub fn apply_planes<T: Copy>(&self, data: &mut [T], h: usize, w: usize) {
        for plane in data.chunks_exact_mut(h * w) {
            if self.horizontal {
                for row in plane.chunks_exact_mut(w) {
                    row.reverse();
                }
            }
            if self.vertical {
                for y in 0..h / 2 {
                    let (top, bottom) = plane.split_at_mut((h - 1 - y) * w);
                    top[y * w..(y + 1) * w].swap_with_slice(&mut bottom[..w]);
                }
            }
        }
    }

    pub fn apply_box(&self, b: Box2D, w: usize, h: usize) -> Box2D {
        let (mw, mh) = ((w - 1) as f32, (h - 1) as f32);
        let (x1, x2) = if self.horizontal { (mw - b.x2, mw - b.x1) } else { (b.x1, b.x2) };
        let (y1, y2) = if self.vertical { (mh - b.y2, mh - b.y1) } else { (b.y1, b.y2) };
        Box2D::new(x1, y1, x2, y2)
    }
}

/// Flip a `C×H×W` image and its `H×W` mask together.
pub fn augment(image: &mut Tensor, mask: &mut [u8], rng: &mut Rng, flip_prob: f64) -> Result<Flips> {
    let (h, w) = match image.shape()[..] {
        [_, h, w] => (h, w),
        _ => return Err(Error::shape("augment expects C×H×W")),
    };
    if mask.len() != h * w {
        return Err(Error::shape("augment: mask and image extents differ"));
    }
    let f = Flips::draw(rng, flip_prob);
    f.apply_planes(image.data_mut(), h, w);
    f.apply_planes(mask, h, w);
    Ok(f)
}
