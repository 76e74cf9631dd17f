//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction; `backward` walks it once in reverse.

use super::{
    axis_split, check_perm, col2im, gelu_grad_scalar, gelu_scalar, gemm, im2col, layernorm_rows,
    permute_data, pixel_shuffle, pixel_unshuffle, ConvGeom, Tensor,
};
use crate::error::{Error, Module, Result};
use crate::quant;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Largest inner extent for which an `f32` sum of 8-bit lattice products is exact
/// (`k·127² < 2^24`).
pub const EXACT_LATTICE_K: usize = (1 << 24) / (127 * 127);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    QMatMul { a: Var, b: Var, sa: Var, sb: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f32 },
    MulScalarVar { x: Var, s: Var },
    AddRow { x: Var, bias: Var },
    AddCol { x: Var, bias: Var },
    Permute { x: Var, perm: Vec<usize> },
    Reshape { x: Var },
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    Gelu { x: Var },
    Relu { x: Var },
    Im2Col { x: Var, geom: ConvGeom },
    PixelShuffle { x: Var, c_out: usize, k: usize, h: usize, w: usize },
    QuantInt { x: Var, s: Var, q_max: f32 },
    GradScale { x: Var, factor: f32 },
    Sum { x: Var },
    External { inputs: Vec<Var>, local: Vec<Vec<f32>> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// A single-owner recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    integer_kernels: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f32>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn dims2(t: &Tensor) -> Result<(usize, usize)> {
    t.dims2()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose quantized matmuls run on the 8-bit/`i32` kernels.
    /// The result is bit-identical to the float lattice path but cannot be
    /// differentiated.
    pub fn integer() -> Self {
        Tape { nodes: Vec::new(), integer_kernels: true }
    }

    pub fn uses_integer_kernels(&self) -> bool {
        self.integer_kernels
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::matmul(self.val(a), self.val(b))?;
        Ok(self.push(out, Op::MatMul { a, b }, &[a, b]))
    }

    /// `sa·sb·(a·b)` for integer-valued `a`, `b` (outputs of [`Tape::quant_int`]).
    pub fn qmatmul(&mut self, a: Var, b: Var, sa: Var, sb: Var) -> Result<Var> {
        let (m, k) = dims2(self.val(a))?;
        let (k2, n) = dims2(self.val(b))?;
        if k != k2 {
            return Err(Error::shape(format!("qmatmul inner extents {k} vs {k2}")));
        }
        if k > EXACT_LATTICE_K {
            return Err(Error::contract(
                Module::Quant,
                format!("qmatmul inner extent {k} exceeds exact-accumulation bound {EXACT_LATTICE_K}"),
            ));
        }
        let prod = self.val(sa).data()[0] * self.val(sb).data()[0];
        let out = if self.integer_kernels {
            let qa: Vec<i8> = self.val(a).data().iter().map(|&v| v as i8).collect();
            let qb: Vec<i8> = self.val(b).data().iter().map(|&v| v as i8).collect();
            quant::int8_gemm_i32(m, k, n, &qa, &qb).into_iter().map(|acc| acc as f32 * prod).collect()
        } else {
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, self.val(a).data(), false, self.val(b).data(), false, &mut c, 0.0);
            c.iter_mut().for_each(|v| *v *= prod);
            c
        };
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::QMatMul { a, b, sa, sb }, &[a, b, sa, sb]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).add(self.val(b))?;
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).zip(self.val(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).mul(self.val(b))?;
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let out = self.val(x).map(|v| v * factor);
        self.push(out, Op::Scale { x, factor }, &[x])
    }

    /// `s·x` for a one-element `s`.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.val(s).numel() != 1 {
            return Err(Error::shape("mul_scalar_var expects a one-element scale"));
        }
        let sv = self.val(s).data()[0];
        let out = self.val(x).map(|v| v * sv);
        Ok(self.push(out, Op::MulScalarVar { x, s }, &[x, s]))
    }

    /// Broadcast-add a vector over the last axis.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.val(x).shape().last().unwrap_or(&0);
        if self.val(bias).numel() != n {
            return Err(Error::shape(format!("row bias of {} for last extent {n}", self.val(bias).numel())));
        }
        let b = self.val(bias).data();
        let mut out = self.val(x).clone();
        out.data_mut().chunks_mut(n).for_each(|r| r.iter_mut().zip(b).for_each(|(v, bb)| *v += bb));
        Ok(self.push(out, Op::AddRow { x, bias }, &[x, bias]))
    }

    /// Broadcast-add a vector over the first axis (per-channel bias on C×…).
    pub fn add_col(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.val(x).shape()[0];
        if self.val(bias).numel() != c {
            return Err(Error::shape(format!("channel bias of {} for {c} channels", self.val(bias).numel())));
        }
        let inner = self.val(x).numel() / c.max(1);
        let b = self.val(bias).data();
        let mut out = self.val(x).clone();
        out.data_mut().chunks_mut(inner).zip(b).for_each(|(r, bb)| r.iter_mut().for_each(|v| *v += bb));
        Ok(self.push(out, Op::AddCol { x, bias }, &[x, bias]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        check_perm(perm, self.val(x).rank())?;
        let (shape, data) = permute_data(self.val(x).data(), self.val(x).shape(), perm);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.val(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(self.val(x))?;
        if start + len > c {
            return Err(Error::Index { index: start + len, len: c });
        }
        let src = self.val(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let out = Tensor::new(vec![r, len], out)?;
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(self.val(x))?;
        if start + len > r {
            return Err(Error::Index { index: start + len, len: r });
        }
        let out = Tensor::new(vec![len, c], self.val(x).data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(out, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = dims2(self.val(parts[0]))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = dims2(self.val(p))?;
            if pr != r {
                return Err(Error::shape(format!("concat_cols rows {pr} vs {r}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.val(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new(vec![r, total], out)?;
        Ok(self.push(out, Op::ConcatCols { parts: parts.to_vec() }, parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = dims2(self.val(parts[0]))?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = dims2(self.val(p))?;
            if pc != c {
                return Err(Error::shape(format!("concat_rows cols {pc} vs {c}")));
            }
            rows += pr;
            out.extend_from_slice(self.val(p).data());
        }
        let out = Tensor::new(vec![rows, c], out)?;
        Ok(self.push(out, Op::ConcatRows { parts: parts.to_vec() }, parts))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = super::softmax(self.val(x), axis)?;
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let n = *self.val(x).shape().last().ok_or_else(|| Error::shape("layernorm on rank-0"))?;
        if self.val(gamma).numel() != n || self.val(beta).numel() != n {
            return Err(Error::shape(format!("layernorm affine params must have {n} elements")));
        }
        let (y, xhat, rstd) =
            layernorm_rows(self.val(x).data(), self.val(gamma).data(), self.val(beta).data(), n, eps);
        let out = Tensor::new(self.val(x).shape().to_vec(), y)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.val(x).map(gelu_scalar);
        self.push(out, Op::Gelu { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.val(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu { x }, &[x])
    }

    pub fn im2col(&mut self, x: Var, geom: ConvGeom) -> Result<Var> {
        let expect = geom.channels * geom.height * geom.width;
        if self.val(x).numel() != expect {
            return Err(Error::shape(format!("im2col input has {} elements, geometry needs {expect}", self.val(x).numel())));
        }
        let cols = im2col(self.val(x).data(), &geom);
        let out = Tensor::new(vec![geom.col_rows(), geom.col_cols()], cols)?;
        Ok(self.push(out, Op::Im2Col { x, geom }, &[x]))
    }

    /// `(c_out·k·k) × (h·w)` → `c_out × (h·k) × (w·k)`.
    pub fn pixel_shuffle(&mut self, x: Var, c_out: usize, k: usize, h: usize, w: usize) -> Result<Var> {
        if self.val(x).numel() != c_out * k * k * h * w {
            return Err(Error::shape("pixel_shuffle extent mismatch"));
        }
        let data = pixel_shuffle(self.val(x).data(), c_out, k, h, w);
        let out = Tensor::new(vec![c_out, h * k, w * k], data)?;
        Ok(self.push(out, Op::PixelShuffle { x, c_out, k, h, w }, &[x]))
    }

    /// Integer lattice coordinates `clamp(round(x/s), −q_max, q_max)`, with a
    /// straight-through backward rule inside the clip range.
    pub fn quant_int(&mut self, x: Var, s: Var, q_max: f32) -> Result<Var> {
        if self.val(s).numel() != 1 {
            return Err(Error::shape("quant_int expects a one-element scale"));
        }
        let sv = self.val(s).data()[0];
        let out = self.val(x).map(|v| quant::lattice(v, sv, q_max));
        Ok(self.push(out, Op::QuantInt { x, s, q_max }, &[x, s]))
    }

    /// Identity forward; multiplies the incoming gradient by `factor`.
    pub fn grad_scale(&mut self, x: Var, factor: f32) -> Var {
        let out = self.val(x).clone();
        self.push(out, Op::GradScale { x, factor }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.val(x).sum());
        self.push(out, Op::Sum { x }, &[x])
    }

    /// Record a scalar computed outside the tape, given its gradient with
    /// respect to each input.
    pub fn external(&mut self, inputs: &[Var], value: f32, local: Vec<Vec<f32>>) -> Result<Var> {
        if inputs.len() != local.len() {
            return Err(Error::contract(Module::Tensor, "external: one gradient per input"));
        }
        for (v, g) in inputs.iter().zip(&local) {
            if self.val(*v).numel() != g.len() {
                return Err(Error::shape("external: gradient length differs from input"));
            }
        }
        Ok(self.push(Tensor::scalar(value), Op::External { inputs: inputs.to_vec(), local }, inputs))
    }

    /// Back-propagate from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.integer_kernels {
            return Err(Error::contract(Module::Tensor, "integer-kernel tapes are not differentiable"));
        }
        if self.val(loss).numel() != 1 {
            return Err(Error::contract(
                Module::Tensor,
                format!("backward needs a scalar loss, got shape {:?}", self.val(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
            if nodes[v.0].requires_grad {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
                f(buf);
            }
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = nodes[a.0].value.dims2().unwrap();
                let n = out.shape()[1];
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |da| gemm(m, n, k, g, false, bv, true, da, 1.0));
                acc(*b, &mut |db| gemm(k, m, n, av, true, g, false, db, 1.0));
            }
            Op::QMatMul { a, b, sa, sb } => {
                let (m, k) = nodes[a.0].value.dims2().unwrap();
                let n = out.shape()[1];
                let (sav, sbv) = (nodes[sa.0].value.data()[0], nodes[sb.0].value.data()[0]);
                let prod = sav * sbv;
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let needs_a = nodes[a.0].requires_grad;
                let needs_b = nodes[b.0].requires_grad;
                if needs_a || needs_b {
                    let gs: Vec<f32> = g.iter().map(|x| x * prod).collect();
                    acc(*a, &mut |da| gemm(m, n, k, &gs, false, bv, true, da, 1.0));
                    acc(*b, &mut |db| gemm(k, m, n, av, true, &gs, false, db, 1.0));
                }
                if nodes[sa.0].requires_grad || nodes[sb.0].requires_grad {
                    let dot: f64 = g.iter().zip(out.data()).map(|(&x, &y)| x as f64 * y as f64).sum();
                    acc(*sa, &mut |d| d[0] += (dot / sav as f64) as f32);
                    acc(*sb, &mut |d| d[0] += (dot / sbv as f64) as f32);
                }
            }
            Op::Add { a, b } => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::Sub { a, b } => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |d| d.iter_mut().zip(g).zip(bv).for_each(|((d, g), b)| *d += g * b));
                acc(*b, &mut |d| d.iter_mut().zip(g).zip(av).for_each(|((d, g), a)| *d += g * a));
            }
            Op::Scale { x, factor } => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * factor));
            }
            Op::MulScalarVar { x, s } => {
                let sv = nodes[s.0].value.data()[0];
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * sv));
                acc(*s, &mut |d| {
                    d[0] += g.iter().zip(xv).map(|(&g, &x)| g as f64 * x as f64).sum::<f64>() as f32
                });
            }
            Op::AddRow { x, bias } => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*bias, &mut |d| {
                    let n = d.len();
                    g.chunks(n).for_each(|r| d.iter_mut().zip(r).for_each(|(d, g)| *d += g));
                });
            }
            Op::AddCol { x, bias } => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(*bias, &mut |d| {
                    let inner = g.len() / d.len();
                    d.iter_mut().zip(g.chunks(inner)).for_each(|(d, r)| *d += r.iter().sum::<f32>());
                });
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                perm.iter().enumerate().for_each(|(i, &p)| inv[p] = i);
                let (_, back) = permute_data(g, out.shape(), &inv);
                acc(*x, &mut |d| d.iter_mut().zip(&back).for_each(|(d, g)| *d += g));
            }
            Op::Reshape { x } => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::SliceCols { x, start } => {
                let len = out.shape()[1];
                let c = nodes[x.0].value.shape()[1];
                acc(*x, &mut |d| {
                    for (r, gr) in g.chunks(len).enumerate() {
                        d[r * c + start..r * c + start + len].iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let c = out.shape()[1];
                acc(*x, &mut |d| d[start * c..start * c + g.len()].iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::ConcatCols { parts } => {
                let total = out.shape()[1];
                let mut off = 0;
                for p in parts {
                    let w = nodes[p.0].value.shape()[1];
                    acc(*p, &mut |d| {
                        for (r, dr) in d.chunks_mut(w).enumerate() {
                            dr.iter_mut().zip(&g[r * total + off..r * total + off + w]).for_each(|(d, g)| *d += g);
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for p in parts {
                    let n = nodes[p.0].value.numel();
                    acc(*p, &mut |d| d.iter_mut().zip(&g[off..off + n]).for_each(|(d, g)| *d += g));
                    off += n;
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis).unwrap();
                let y = out.data();
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: f32 = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                            for j in 0..len {
                                let idx = base + j * inner;
                                d[idx] += y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gm = nodes[gamma.0].value.data();
                let n = gm.len();
                acc(*x, &mut |d| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut m1 = 0.0f32;
                        let mut m2 = 0.0f32;
                        for j in 0..n {
                            let dh = gr[j] * gm[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= n as f32;
                        m2 /= n as f32;
                        for j in 0..n {
                            d[r * n + j] += rs * (gr[j] * gm[j] - m1 - hr[j] * m2);
                        }
                    }
                });
                acc(*gamma, &mut |d| {
                    g.chunks(n).zip(xhat.chunks(n)).for_each(|(gr, hr)| {
                        d.iter_mut().zip(gr.iter().zip(hr)).for_each(|(d, (g, h))| *d += g * h)
                    })
                });
                acc(*beta, &mut |d| g.chunks(n).for_each(|gr| d.iter_mut().zip(gr).for_each(|(d, g)| *d += g)));
            }
            Op::Gelu { x } => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |d| d.iter_mut().zip(g).zip(xv).for_each(|((d, g), &x)| *d += g * gelu_grad_scalar(x)));
            }
            Op::Relu { x } => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |d| {
                    d.iter_mut().zip(g).zip(xv).for_each(|((d, g), &x)| {
                        if x > 0.0 {
                            *d += g
                        }
                    })
                });
            }
            Op::Im2Col { x, geom } => {
                acc(*x, &mut |d| col2im(g, geom, d));
            }
            Op::PixelShuffle { x, c_out, k, h, w } => {
                let back = pixel_unshuffle(g, *c_out, *k, *h, *w);
                acc(*x, &mut |d| d.iter_mut().zip(&back).for_each(|(d, g)| *d += g));
            }
            Op::QuantInt { x, s, q_max } => {
                let sv = nodes[s.0].value.data()[0];
                let xv = nodes[x.0].value.data();
                let inv = 1.0 / sv;
                acc(*x, &mut |d| {
                    d.iter_mut().zip(g).zip(xv).for_each(|((d, g), &x)| {
                        if (x / sv).abs() <= *q_max {
                            *d += g * inv
                        }
                    })
                });
                acc(*s, &mut |d| {
                    let mut total = 0.0f64;
                    for (&g, &x) in g.iter().zip(xv) {
                        let v = x / sv;
                        if v.abs() <= *q_max {
                            total -= g as f64 * (v as f64 / sv as f64);
                        }
                    }
                    d[0] += total as f32;
                });
            }
            Op::GradScale { x, factor } => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * factor));
            }
            Op::Sum { x } => {
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::External { inputs, local } => {
                for (v, l) in inputs.iter().zip(local) {
                    acc(*v, &mut |d| d.iter_mut().zip(l).for_each(|(d, l)| *d += g[0] * l));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences in f64 of `f` around `x0`, compared with
    /// the tape gradient of the leaf built from `x0`.
    fn check_grad(x0: &Tensor, build: impl Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let y = build(&mut tape, x);
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(x).unwrap().to_vec();
        let h = 1e-3f32;
        let eval = |t: Tensor| {
            let mut tp = Tape::new();
            let v = tp.leaf(t, false);
            let y = build(&mut tp, v);
            tp.value(y).data().iter().map(|&v| v as f64).sum::<f64>()
        };
        for i in 0..x0.numel() {
            let mut p = x0.clone();
            p.data_mut()[i] += h;
            let mut m = x0.clone();
            m.data_mut()[i] -= h;
            let fd = (eval(p) - eval(m)) / (2.0 * h as f64);
            let a = analytic[i] as f64;
            let rel = (a - fd).abs() / fd.abs().max(a.abs()).max(1e-2);
            assert!(rel < 1e-2, "elem {i}: analytic {a} vs fd {fd}");
        }
    }

    #[test]
    fn sum_and_square_grads() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract { .. })));
    }

    #[test]
    fn unreachable_leaf_untouched() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2], 1.0), true);
        let y = tape.leaf(Tensor::full(&[2], 1.0), true);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert!(g.get(y).is_none());
    }

    #[test]
    fn op_gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let w = rand_tensor(&mut rng, &[4, 3]);
        let x0 = rand_tensor(&mut rng, &[5, 4]);
        check_grad(&x0, |t, x| {
            let wv = t.constant(w.clone());
            t.matmul(x, wv).unwrap()
        });
        check_grad(&x0, |t, x| {
            let wv = t.constant(w.clone());
            let y = t.matmul(x, wv).unwrap();
            t.softmax(y, 1).unwrap()
        });
        check_grad(&x0, |t, x| {
            let y = t.softmax(x, 0).unwrap();
            let z = t.mul(y, x).unwrap();
            t.gelu(z)
        });
        let gamma = rand_tensor(&mut rng, &[4]);
        let beta = rand_tensor(&mut rng, &[4]);
        check_grad(&x0, |t, x| {
            let g = t.constant(gamma.clone());
            let b = t.constant(beta.clone());
            let y = t.layernorm(x, g, b, 1e-5).unwrap();
            t.mul(y, y).unwrap()
        });
        check_grad(&x0, |t, x| {
            let a = t.transpose(x).unwrap();
            let b = t.slice_cols(a, 1, 3).unwrap();
            let c = t.slice_rows(x, 2, 3).unwrap();
            let d = t.matmul(b, c).unwrap();
            let e = t.concat_rows(&[d, d]).unwrap();
            t.concat_cols(&[e, e]).unwrap()
        });
        let img = rand_tensor(&mut rng, &[2, 5, 5]);
        let geom = ConvGeom::new(2, 5, 5, 3, 2, 1).unwrap();
        let cw = rand_tensor(&mut rng, &[3, 18]);
        check_grad(&img, |t, x| {
            let cols = t.im2col(x, geom).unwrap();
            let w = t.constant(cw.clone());
            let y = t.matmul(w, cols).unwrap();
            let y = t.reshape(y, &[3, 3, 3]).unwrap();
            let b = t.constant(Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap());
            let y = t.add_col(y, b).unwrap();
            let y2 = t.mul(y, y).unwrap();
            t.permute(y2, &[2, 0, 1]).unwrap()
        });
        let small = rand_tensor(&mut rng, &[8, 3]);
        check_grad(&small, |t, x| {
            let y = t.pixel_shuffle(x, 2, 2, 1, 3).unwrap();
            let y = t.mul(y, y).unwrap();
            let b = t.constant(Tensor::new(vec![6], vec![0.5; 6]).unwrap());
            let z = t.add_row(y, b).unwrap();
            t.relu(z)
        });
    }

    #[test]
    fn bias_and_scalar_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[3, 2], 1.0), false);
        let b = tape.leaf(Tensor::zeros(&[2]), true);
        let s = tape.leaf(Tensor::scalar(2.0), true);
        let y = tape.add_row(x, b).unwrap();
        let z = tape.mul_scalar_var(y, s).unwrap();
        let l = tape.sum(z);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(b).unwrap(), &[6.0, 6.0]);
        assert_eq!(g.get(s).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let a = rand_tensor(&mut rng, &[6, 5]);
        let b = rand_tensor(&mut rng, &[5, 7]);
        let run = || {
            let mut t = Tape::new();
            let av = t.leaf(a.clone(), true);
            let bv = t.leaf(b.clone(), true);
            let c = t.matmul(av, bv).unwrap();
            let c = t.softmax(c, 1).unwrap();
            let l = t.sum(c);
            let g = t.backward(l).unwrap();
            (g.get(av).unwrap().to_vec(), g.get(bv).unwrap().to_vec())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn integer_tape_matches_float_lattice_path() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let a = rand_tensor(&mut rng, &[7, 33]);
        let b = rand_tensor(&mut rng, &[33, 9]);
        let run = |mut t: Tape| {
            let av = t.constant(a.clone());
            let bv = t.constant(b.clone());
            let sa = t.constant(Tensor::scalar(0.0079));
            let sb = t.constant(Tensor::scalar(0.0083));
            let qa = t.quant_int(av, sa, 127.0).unwrap();
            let qb = t.quant_int(bv, sb, 127.0).unwrap();
            let c = t.qmatmul(qa, qb, sa, sb).unwrap();
            t.value(c).clone()
        };
        assert_eq!(run(Tape::new()), run(Tape::integer()));
    }
}
