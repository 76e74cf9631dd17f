//! Tape-building forward context shared by training and inference.

use std::collections::{BTreeMap, HashMap};

use super::{decoder, encoder, is_buffer, prompt, Group, Model};
use crate::boxes::Box2D;
use crate::error::{Error, Module, Result};
use crate::quant::{lsq_grad_factor, Q_MAX};
use crate::tensor::{Tape, Tensor, Var};

/// Which submodules receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Trainable {
    pub encoder: bool,
    pub prompt: bool,
    pub decoder: bool,
}

impl Trainable {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Trainable { encoder: true, prompt: true, decoder: true }
    }

    pub fn contains(&self, g: Group) -> bool {
        match g {
            Group::Encoder => self.encoder,
            Group::Prompt => self.prompt,
            Group::Decoder => self.decoder,
        }
    }
}

/// Running max-abs per quantizer node, collected while calibrating.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Observations(BTreeMap<String, f32>);

impl Observations {
    pub fn record(&mut self, node: &str, max_abs: f32) {
        let e = self.0.entry(node.to_string()).or_insert(0.0);
        *e = e.max(max_abs);
    }

    pub fn merge(&mut self, other: &Observations) {
        for (k, &v) in &other.0 {
            self.record(k, v);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &f32)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub struct ForwardOut {
    /// Mask logits, `1 × mask_resolution²`.
    pub logits: Var,
    /// Encoder output tokens, `tokens × embed_dim`.
    pub embedding: Var,
}

pub struct Ctx<'m> {
    pub tape: Tape,
    model: &'m Model,
    trainable: Trainable,
    params: HashMap<String, Var>,
    scales: HashMap<String, Var>,
    observing: bool,
    observations: Observations,
}

impl<'m> Ctx<'m> {
    pub fn new(model: &'m Model, tape: Tape, trainable: Trainable) -> Self {
        Ctx {
            tape,
            model,
            trainable,
            params: HashMap::new(),
            scales: HashMap::new(),
            observing: false,
            observations: Observations::default(),
        }
    }

    /// Record max-abs at every uncalibrated quantizer node the forward touches.
    pub fn observe(mut self) -> Self {
        self.observing = true;
        self
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn observations(&self) -> &Observations {
        &self.observations
    }

    pub fn take_observations(&mut self) -> Observations {
        std::mem::take(&mut self.observations)
    }

    /// Bound parameter leaves, by name.
    pub fn bound_params(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter()
    }

    /// Bound quantizer scale leaves, by node name.
    pub fn bound_scales(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.scales.iter()
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = self.model.param(name)?.clone();
        let grad = !is_buffer(name) && self.trainable.contains(Group::of(name));
        let v = self.tape.leaf(t, grad);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn active(&self, node: &str) -> bool {
        self.model.is_quantized(Group::of(node))
            && self.model.quantizers().get(node).is_some_and(|s| s.calibrated)
    }

    fn note(&mut self, x: Var, node: &str) {
        if self.observing && self.model.is_quantized(Group::of(node)) && !self.active(node) {
            let m = self.tape.value(x).max_abs();
            self.observations.record(node, m);
        }
    }

    /// Lattice coordinates and the gradient-scaled scale for a calibrated node.
    fn quant(&mut self, x: Var, node: &str) -> Result<(Var, Var)> {
        let s = match self.scales.get(node) {
            Some(&s) => s,
            None => {
                let st = self.model.quantizers()[node];
                let grad = self.trainable.contains(Group::of(node));
                let s = self.tape.leaf(Tensor::new(vec![1], vec![st.scale])?, grad);
                self.scales.insert(node.to_string(), s);
                s
            }
        };
        let n = self.tape.value(x).numel();
        let sg = self.tape.grad_scale(s, lsq_grad_factor(n, Q_MAX));
        let q = self.tape.quant_int(x, sg, Q_MAX as f32)?;
        Ok((q, sg))
    }

    /// Quantize both operands if both nodes are active; otherwise observe them.
    pub fn quantize_pair(&mut self, a: Var, b: Var, na: &str, nb: &str) -> Result<Option<((Var, Var), (Var, Var))>> {
        if self.active(na) && self.active(nb) {
            Ok(Some((self.quant(a, na)?, self.quant(b, nb)?)))
        } else {
            self.note(a, na);
            self.note(b, nb);
            Ok(None)
        }
    }

    /// `a · b`, fake-quantized at nodes `na`/`nb` when both are active.
    pub fn mm(&mut self, a: Var, b: Var, na: &str, nb: &str) -> Result<Var> {
        match self.quantize_pair(a, b, na, nb)? {
            Some(((qa, sa), (qb, sb))) => self.tape.qmatmul(qa, qb, sa, sb),
            None => self.tape.matmul(a, b),
        }
    }

    /// `x · W + b` for the layer with parameters `<prefix>.w`, `<prefix>.b`.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let y = self.mm(x, w, &format!("{prefix}.act"), &format!("{prefix}.weight"))?;
        self.tape.add_row(y, b)
    }

    pub fn layernorm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.g"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        self.tape.layernorm(x, g, b, 1e-5)
    }

    /// Multi-head attention with projections `<prefix>.{q,k,v,o}`.
    pub fn attention(&mut self, xq: Var, xk: Var, xv: Var, prefix: &str, heads: usize) -> Result<Var> {
        let q = self.linear(xq, &format!("{prefix}.q"))?;
        let k = self.linear(xk, &format!("{prefix}.k"))?;
        let v = self.linear(xv, &format!("{prefix}.v"))?;
        let (tq, width) = self.tape.value(q).dims2()?;
        if width % heads != 0 {
            return Err(Error::contract(Module::Model, format!("width {width} not divisible by {heads} heads")));
        }
        let dh = width / heads;
        let (nq, nk, np, nv) =
            (format!("{prefix}.qk.q"), format!("{prefix}.qk.k"), format!("{prefix}.pv.p"), format!("{prefix}.pv.v"));
        let quantized = self.active(&nq) && self.active(&nk) && self.active(&np) && self.active(&nv);
        let (q, sq, k, sk, v, sv) = if quantized {
            let (q, sq) = self.quant(q, &nq)?;
            let (k, sk) = self.quant(k, &nk)?;
            let (v, sv) = self.quant(v, &nv)?;
            (q, Some(sq), k, Some(sk), v, Some(sv))
        } else {
            self.note(q, &nq);
            self.note(k, &nk);
            self.note(v, &nv);
            (q, None, k, None, v, None)
        };
        let mut scores = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.tape.slice_cols(q, h * dh, dh)?;
            let kh = self.tape.slice_cols(k, h * dh, dh)?;
            let kt = self.tape.transpose(kh)?;
            scores.push(match (sq, sk) {
                (Some(sq), Some(sk)) => self.tape.qmatmul(qh, kt, sq, sk)?,
                _ => self.tape.matmul(qh, kt)?,
            });
        }
        let s = self.tape.concat_rows(&scores)?;
        let s = self.tape.scale(s, 1.0 / (dh as f32).sqrt());
        let p = self.tape.softmax(s, 1)?;
        let (p, sp) = if quantized {
            let (p, sp) = self.quant(p, &np)?;
            (p, Some(sp))
        } else {
            self.note(p, &np);
            (p, None)
        };
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let ph = self.tape.slice_rows(p, h * tq, tq)?;
            let vh = self.tape.slice_cols(v, h * dh, dh)?;
            outs.push(match (sp, sv) {
                (Some(sp), Some(sv)) => self.tape.qmatmul(ph, vh, sp, sv)?,
                _ => self.tape.matmul(ph, vh)?,
            });
        }
        let o = self.tape.concat_cols(&outs)?;
        self.linear(o, &format!("{prefix}.o"))
    }

    /// Full forward for one preprocessed image (`3×S×S`) and a box in
    /// model-input pixel coordinates.
    pub fn forward(&mut self, image: &Tensor, b: Box2D) -> Result<ForwardOut> {
        let x = self.tape.constant(image.clone());
        let embedding = encoder::forward(self, x)?;
        let p = prompt::forward(self, b)?;
        let shared = decoder::Shared::new(self, embedding)?;
        let logits = decoder::forward(self, &shared, p)?;
        Ok(ForwardOut { logits, embedding })
    }
}
