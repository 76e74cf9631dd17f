//! Dense row-major `f32` tensors, the kernels behind them, and a
//! reverse-mode tape (see [`tape`]).

pub mod tape;

use crate::error::{Error, Result};

pub use tape::{Gradients, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f32) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(format!("expected rank 2, got {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        same_shape(self, other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip(other, |a, b| a + b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip(other, |a, b| a * b)
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().map(|&x| x as f64).sum::<f64>() as f32
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, &x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub(crate) fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

/// `c = a·b + beta·c` where `a` is m×k (or k×m if `ta`) and `b` is k×n (or n×k if `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    ta: bool,
    b: &[f32],
    tb: bool,
    c: &mut [f32],
    beta: f32,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and the strides describe
    // exactly the m×k, k×n and m×n row-major extents.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(format!("matmul inner extents {k} vs {k2}")));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, false, &b.data, false, &mut out, 0.0);
    Tensor::new(vec![m, n], out)
}

/// Geometry of a 2D convolution window sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 || kernel == 0 {
            return Err(Error::shape("conv stride and kernel must be >= 1"));
        }
        if kernel > height + 2 * pad || kernel > width + 2 * pad {
            return Err(Error::shape(format!("kernel {kernel} larger than padded input {height}x{width}+{pad}")));
        }
        if (height + 2 * pad - kernel) % stride != 0 || (width + 2 * pad - kernel) % stride != 0 {
            return Err(Error::shape(format!(
                "non-integral conv output for {height}x{width}, k={kernel}, stride={stride}, pad={pad}"
            )));
        }
        Ok(ConvGeom { channels, height, width, kernel, stride, pad })
    }

    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfold `x` (C×H×W) into a `C·k·k × H'·W'` column matrix; padding reads as zero.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    let mut cols = vec![0.0; g.col_rows() * oh * ow];
    for c in 0..g.channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &x[(c * g.height + iy as usize) * g.width..][..g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back onto a C×H×W buffer.
pub(crate) fn col2im(cols: &[f32], g: &ConvGeom, out: &mut [f32]) {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    for c in 0..g.channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut out[(c * g.height + iy as usize) * g.width..][..g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x` (C_in×H×W) with `w` (C_out×C_in×k×k).
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (cin, h, wd) = match x.shape[..] {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape(format!("conv2d input must be C×H×W, got {:?}", x.shape))),
    };
    let (cout, k) = match w.shape[..] {
        [co, ci, k1, k2] if ci == cin && k1 == k2 => (co, k1),
        _ => return Err(Error::shape(format!("conv2d weight {:?} incompatible with {cin} channels", w.shape))),
    };
    let g = ConvGeom::new(cin, h, wd, k, stride, pad)?;
    let cols = im2col(&x.data, &g);
    let mut out = vec![0.0; cout * g.col_cols()];
    gemm(cout, g.col_rows(), g.col_cols(), &w.data, false, &cols, false, &mut out, 0.0);
    Tensor::new(vec![cout, g.out_h(), g.out_w()], out)
}

/// Rearrange a `(C_out·k·k) × (H·W)` matrix into `C_out × (H·k) × (W·k)`:
/// the output layout of a transposed convolution whose kernel equals its stride.
pub(crate) fn pixel_shuffle(src: &[f32], c_out: usize, k: usize, h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0; src.len()];
    let (oh, ow) = (h * k, w * k);
    for co in 0..c_out {
        for ki in 0..k {
            for kj in 0..k {
                let row = &src[((co * k + ki) * k + kj) * h * w..][..h * w];
                for y in 0..h {
                    let dst = &mut out[(co * oh + y * k + ki) * ow..][..ow];
                    for x in 0..w {
                        dst[x * k + kj] = row[y * w + x];
                    }
                }
            }
        }
    }
    out
}

/// Inverse permutation of [`pixel_shuffle`].
pub(crate) fn pixel_unshuffle(src: &[f32], c_out: usize, k: usize, h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0; src.len()];
    let (oh, ow) = (h * k, w * k);
    for co in 0..c_out {
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut out[((co * k + ki) * k + kj) * h * w..][..h * w];
                for y in 0..h {
                    let s = &src[(co * oh + y * k + ki) * ow..][..ow];
                    for x in 0..w {
                        row[y * w + x] = s[x * k + kj];
                    }
                }
            }
        }
    }
    out
}

/// Split `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Axis { axis, rank: shape.len() });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub(crate) fn softmax_into(x: &[f32], out: &mut [f32], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut m = f32::NEG_INFINITY;
            for j in 0..len {
                m = m.max(x[base + j * inner]);
            }
            let mut s = 0.0f32;
            for j in 0..len {
                let e = (x[base + j * inner] - m).exp();
                out[base + j * inner] = e;
                s += e;
            }
            let inv = 1.0 / s;
            for j in 0..len {
                out[base + j * inner] *= inv;
            }
        }
    }
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(&x.shape, axis)?;
    let mut out = vec![0.0; x.numel()];
    softmax_into(&x.data, &mut out, outer, len, inner);
    Tensor::new(x.shape.clone(), out)
}

/// Normalise rows of length `n`; returns `(y, xhat, rstd)`.
pub(crate) fn layernorm_rows(x: &[f32], gamma: &[f32], beta: &[f32], n: usize, eps: f32) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let rows = x.len() / n;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * n..(r + 1) * n];
        let mean = row.iter().sum::<f32>() / n as f32;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..n {
            let h = (row[j] - mean) * rs;
            xhat[r * n + j] = h;
            y[r * n + j] = h * gamma[j] + beta[j];
        }
    }
    (y, xhat, rstd)
}

/// Layer normalisation over the last axis.
pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let n = *x.shape.last().ok_or_else(|| Error::shape("layernorm on rank-0 tensor"))?;
    if gamma.numel() != n || beta.numel() != n {
        return Err(Error::shape(format!("layernorm affine params must have {n} elements")));
    }
    let (y, _, _) = layernorm_rows(&x.data, &gamma.data, &beta.data, n, eps);
    Tensor::new(x.shape.clone(), y)
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

/// GELU, tanh approximation.
#[inline]
pub(crate) fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad_scalar(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn check_perm(perm: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if perm.len() != rank {
        return Err(Error::shape(format!("permutation {perm:?} for rank {rank}")));
    }
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(Error::Axis { axis: p, rank });
        }
        seen[p] = true;
    }
    Ok(())
}

/// `out[i_0..i_r] = x[i_perm^-1 ...]`, i.e. output axis `a` is input axis `perm[a]`.
pub(crate) fn permute_data(x: &[f32], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f32>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    if shape.len() == 2 && perm == [1, 0] {
        let (r, c) = (shape[0], shape[1]);
        let mut out = vec![0.0; x.len()];
        const B: usize = 32;
        for i0 in (0..r).step_by(B) {
            for j0 in (0..c).step_by(B) {
                for i in i0..(i0 + B).min(r) {
                    for j in j0..(j0 + B).min(c) {
                        out[j * r + i] = x[i * c + j];
                    }
                }
            }
        }
        return (out_shape, out);
    }
    let in_strides = strides_of(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..x.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(x[off]);
        for a in (0..idx.len()).rev() {
            idx[a] += 1;
            if idx[a] < out_shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    (out_shape, out)
}

pub fn transpose(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    check_perm(perm, x.rank())?;
    let (shape, data) = permute_data(&x.data, &x.shape, perm);
    Tensor::new(shape, data)
}

/// Bilinear resize of a C×H×W tensor with half-pixel-centre alignment:
/// output pixel `o` samples input coordinate `(o + 0.5)·in/out − 0.5`,
/// clamped to the valid range.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = match x.shape[..] {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape(format!("bilinear_resize expects C×H×W, got {:?}", x.shape))),
    };
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::shape("bilinear_resize on empty extent"));
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f32 / n_out as f32;
        (0..n_out)
            .map(|o| {
                let src = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f32);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f32)
            })
            .collect()
    };
    let ys = taps(h, out_h);
    let xs = taps(w, out_w);
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        let plane = &x.data[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let r0 = &plane[y0 * w..(y0 + 1) * w];
            let r1 = &plane[y1 * w..(y1 + 1) * w];
            let dst = &mut out[(ch * out_h + oy) * out_w..][..out_w];
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = r0[x0] + fx * (r0[x1] - r0[x0]);
                let bot = r1[x0] + fx * (r1[x1] - r1[x0]);
                dst[ox] = top + fy * (bot - top);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}
