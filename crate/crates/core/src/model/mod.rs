//! Promptable segmentation network: ViT-style image encoder, float box
//! prompt encoder and a two-way attention mask decoder.
//!
//! Parameters live in a name-keyed map. Every matmul/conv weight is named
//! `<layer>.w`; its weight quantizer is `<layer>.weight` and its input
//! activation quantizer `<layer>.act`. Activation×activation products inside
//! attention carry their own pair of quantizers (`.qk.q`/`.qk.k` and
//! `.pv.p`/`.pv.v`).

mod decoder;
mod encoder;
mod forward;
mod prompt;

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::boxes::Box2D;
use crate::error::{Error, Module, Result};
use crate::quant::QuantizerState;
use crate::rng;
use crate::tensor::{Tape, Tensor};

pub use forward::{Ctx, ForwardOut, Observations, Trainable};
pub use prompt::fourier_features;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub num_heads: usize,
    /// Internal width of the decoder attention projections.
    pub decoder_dim: usize,
    pub mask_resolution: usize,
    pub mlp_ratio: usize,
    pub quantize_encoder: bool,
    pub quantize_decoder: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 256,
            patch_size: 16,
            embed_dim: 64,
            encoder_depth: 4,
            num_heads: 4,
            decoder_dim: 64,
            mask_resolution: 256,
            mlp_ratio: 2,
            quantize_encoder: false,
            quantize_decoder: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(Module::Model, m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!("image_size {} not divisible by patch_size {}", self.image_size, self.patch_size));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 || self.decoder_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} and decoder_dim {} must be divisible by num_heads {}",
                self.embed_dim, self.decoder_dim, self.num_heads
            ));
        }
        if self.mask_resolution != self.image_size {
            return bad(format!("mask_resolution {} must equal image_size {}", self.mask_resolution, self.image_size));
        }
        if self.embed_dim % 8 != 0 || self.embed_dim < 8 {
            return bad(format!("embed_dim {} must be a positive multiple of 8", self.embed_dim));
        }
        if self.mlp_ratio == 0 || self.encoder_depth == 0 {
            return bad("mlp_ratio and encoder_depth must be >= 1".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Upscaling factors of the two transposed convolutions (product = patch size).
    pub fn upscale_factors(&self) -> (usize, usize) {
        let p = self.patch_size;
        let f1 = (1..=p).find(|d| p % d == 0 && d * d >= p).unwrap_or(p);
        (f1, p / f1)
    }

    pub fn upscale_channels(&self) -> (usize, usize) {
        (self.embed_dim / 4, self.embed_dim / 8)
    }
}

/// Submodule a parameter or quantizer belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    Encoder,
    Prompt,
    Decoder,
}

impl Group {
    pub fn of(name: &str) -> Group {
        if name.starts_with("enc.") {
            Group::Encoder
        } else if name.starts_with("prompt.") {
            Group::Prompt
        } else {
            Group::Decoder
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Group::Encoder => "image_encoder",
            Group::Prompt => "prompt_encoder",
            Group::Decoder => "mask_decoder",
        }
    }

    pub const ALL: [Group; 3] = [Group::Encoder, Group::Prompt, Group::Decoder];
}

/// Fixed, non-learned tensors stored with the parameters.
pub fn is_buffer(name: &str) -> bool {
    name == "prompt.pe_gauss"
}

/// Matmul/conv weight that carries a weight quantizer.
pub fn is_quantized_weight(name: &str) -> bool {
    name.ends_with(".w") && Group::of(name) != Group::Prompt
}

pub fn weight_quantizer_name(param: &str) -> String {
    format!("{}.weight", param.trim_end_matches(".w"))
}

/// Selects the float-lattice or integer kernels for quantized matmuls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Kernels {
    #[default]
    Float,
    Integer,
}

impl Kernels {
    pub(crate) fn tape(self) -> Tape {
        match self {
            Kernels::Float => Tape::new(),
            Kernels::Integer => Tape::integer(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: BTreeMap<String, Tensor>,
    quantizers: BTreeMap<String, QuantizerState>,
}

fn uniform(rng: &mut rng::Rng, shape: &[usize], bound: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
}

fn xavier(rng: &mut rng::Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    uniform(rng, shape, (6.0 / (fan_in + fan_out) as f32).sqrt())
}

impl Model {
    /// Randomly initialised model.
    pub fn new(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut r = rng::stream(config.seed, "model-init");
        let mut p = BTreeMap::new();
        let d = config.embed_dim;
        let di = config.decoder_dim;
        let ps = config.patch_size;
        let hidden = d * config.mlp_ratio;
        let linear = |p: &mut BTreeMap<String, Tensor>, r: &mut rng::Rng, name: &str, fi: usize, fo: usize| {
            p.insert(format!("{name}.w"), xavier(r, &[fi, fo], fi, fo));
            p.insert(format!("{name}.b"), Tensor::zeros(&[fo]));
        };
        let norm = |p: &mut BTreeMap<String, Tensor>, name: &str| {
            p.insert(format!("{name}.g"), Tensor::full(&[d], 1.0));
            p.insert(format!("{name}.b"), Tensor::zeros(&[d]));
        };

        let fan = 3 * ps * ps;
        p.insert("enc.patch.w".into(), xavier(&mut r, &[d, 3, ps, ps], fan, d));
        p.insert("enc.patch.b".into(), Tensor::zeros(&[d]));
        for i in 0..config.encoder_depth {
            let b = format!("enc.b{i}");
            norm(&mut p, &format!("{b}.ln1"));
            for proj in ["q", "k", "v", "o"] {
                linear(&mut p, &mut r, &format!("{b}.attn.{proj}"), d, d);
            }
            norm(&mut p, &format!("{b}.ln2"));
            linear(&mut p, &mut r, &format!("{b}.mlp.fc1"), d, hidden);
            linear(&mut p, &mut r, &format!("{b}.mlp.fc2"), hidden, d);
        }
        norm(&mut p, "enc.neck");

        p.insert(
            "prompt.pe_gauss".into(),
            Tensor::from_fn(&[2, d / 2], |_| r.sample::<f32, _>(StandardNormal)),
        );
        p.insert("prompt.corner".into(), uniform(&mut r, &[2, d], 1.0));

        p.insert("dec.mask_token".into(), uniform(&mut r, &[1, d], 1.0));
        for attn in ["dec.self", "dec.t2i", "dec.i2t", "dec.final"] {
            for proj in ["q", "k", "v"] {
                linear(&mut p, &mut r, &format!("{attn}.{proj}"), d, di);
            }
            linear(&mut p, &mut r, &format!("{attn}.o"), di, d);
        }
        for i in 1..=5 {
            norm(&mut p, &format!("dec.ln{i}"));
        }
        linear(&mut p, &mut r, "dec.mlp.fc1", d, 2 * d);
        linear(&mut p, &mut r, "dec.mlp.fc2", 2 * d, d);
        let (f1, f2) = config.upscale_factors();
        let (c1, c2) = config.upscale_channels();
        p.insert("dec.up1.w".into(), xavier(&mut r, &[c1 * f1 * f1, d], d, c1 * f1 * f1));
        p.insert("dec.up1.b".into(), Tensor::zeros(&[c1]));
        p.insert("dec.up2.w".into(), xavier(&mut r, &[c2 * f2 * f2, c1], c1, c2 * f2 * f2));
        p.insert("dec.up2.b".into(), Tensor::zeros(&[c2]));
        linear(&mut p, &mut r, "dec.hyper.fc1", d, d);
        linear(&mut p, &mut r, "dec.hyper.fc2", d, c2);

        let mut config = config;
        let (qe, qd) = (config.quantize_encoder, config.quantize_decoder);
        config.quantize_encoder = false;
        config.quantize_decoder = false;
        let mut model = Model { config, params: p, quantizers: BTreeMap::new() };
        if qe {
            model.enable_quantization(Group::Encoder)?;
        }
        if qd {
            model.enable_quantization(Group::Decoder)?;
        }
        Ok(model)
    }

    /// Rebuild from stored parts (used by the model store).
    pub fn from_parts(
        config: ModelConfig,
        params: BTreeMap<String, Tensor>,
        quantizers: BTreeMap<String, QuantizerState>,
    ) -> Result<Model> {
        config.validate()?;
        let reference = Model::new(ModelConfig { quantize_encoder: false, quantize_decoder: false, ..config.clone() })?;
        for (name, t) in &reference.params {
            match params.get(name) {
                Some(v) if v.shape() == t.shape() => {}
                Some(v) => {
                    return Err(Error::format(
                        Module::Store,
                        format!("tensor `{name}` has shape {:?}, expected {:?}", v.shape(), t.shape()),
                    ))
                }
                None => return Err(Error::format(Module::Store, format!("missing tensor `{name}`"))),
            }
        }
        if let Some(extra) = params.keys().find(|k| !reference.params.contains_key(*k)) {
            return Err(Error::format(Module::Store, format!("unexpected tensor `{extra}`")));
        }
        Ok(Model { config, params, quantizers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::contract(Module::Model, format!("unknown parameter `{name}`")))
    }

    pub fn quantizers(&self) -> &BTreeMap<String, QuantizerState> {
        &self.quantizers
    }

    pub fn quantizers_mut(&mut self) -> &mut BTreeMap<String, QuantizerState> {
        &mut self.quantizers
    }

    pub fn is_quantized(&self, group: Group) -> bool {
        match group {
            Group::Encoder => self.config.quantize_encoder,
            Group::Decoder => self.config.quantize_decoder,
            Group::Prompt => false,
        }
    }

    /// Turn on fake quantization for a submodule. Weight quantizers are
    /// initialised from `max|w|/127`; activation quantizers calibrate on the
    /// next forward pass run with observation enabled.
    pub fn enable_quantization(&mut self, group: Group) -> Result<()> {
        match group {
            Group::Encoder => self.config.quantize_encoder = true,
            Group::Decoder => self.config.quantize_decoder = true,
            Group::Prompt => {
                return Err(Error::contract(Module::Model, "the prompt encoder stays in floating point"))
            }
        }
        for (name, w) in &self.params {
            if Group::of(name) == group && is_quantized_weight(name) {
                let st = self.quantizers.entry(weight_quantizer_name(name)).or_default();
                st.calibrate(w)?;
            }
        }
        Ok(())
    }

    /// Calibrate every still-uncalibrated quantizer seen in `obs`.
    pub fn apply_observations(&mut self, obs: &Observations) {
        for (name, &m) in obs.iter() {
            self.quantizers.entry(name.clone()).or_default().calibrate_from_max_abs(m);
        }
    }

    /// Calibrate activation quantizers from float passes over `samples`
    /// (max-abs over all of them). Returns the number of nodes calibrated.
    pub fn calibrate_activations(&mut self, samples: &[(Tensor, Box2D)]) -> Result<usize> {
        let mut obs = Observations::default();
        for (image, b) in samples {
            self.check_image(image)?;
            let mut ctx = Ctx::new(self, Tape::new(), Trainable::none()).observe();
            ctx.forward(image, *b)?;
            obs.merge(ctx.observations());
        }
        self.apply_observations(&obs);
        Ok(obs.len())
    }

    pub fn uncalibrated_nodes(&self) -> Vec<&str> {
        self.quantizers.iter().filter(|(_, s)| !s.calibrated).map(|(n, _)| n.as_str()).collect()
    }

    /// Learned parameter count per submodule (buffers excluded).
    pub fn param_counts(&self) -> BTreeMap<Group, usize> {
        let mut out: BTreeMap<Group, usize> = Group::ALL.iter().map(|&g| (g, 0)).collect();
        for (name, t) in &self.params {
            if !is_buffer(name) {
                *out.get_mut(&Group::of(name)).unwrap() += t.numel();
            }
        }
        out
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let s = self.config.image_size;
        if image.shape() != [3, s, s] {
            return Err(Error::shape(format!("image must be 3×{s}×{s}, got {:?}", image.shape())));
        }
        Ok(())
    }

    /// Image embedding as `embed_dim × grid × grid`.
    pub fn encode_image(&self, image: &Tensor) -> Result<Tensor> {
        self.encode_image_with(image, Kernels::Float)
    }

    pub fn encode_image_with(&self, image: &Tensor, kernels: Kernels) -> Result<Tensor> {
        self.check_image(image)?;
        let mut ctx = Ctx::new(self, kernels.tape(), Trainable::none());
        let x = ctx.tape.constant(image.clone());
        let tokens = encoder::forward(&mut ctx, x)?;
        let emb = ctx.tape.transpose(tokens)?;
        let g = self.config.grid();
        ctx.tape.value(emb).clone().reshape(&[self.config.embed_dim, g, g])
    }

    /// Two corner tokens (`2 × embed_dim`) for a box in model-input pixels.
    pub fn encode_prompt(&self, b: Box2D) -> Result<Tensor> {
        prompt::encode(self, b)
    }

    /// Mask logits (`mask_resolution²`) for one prompt.
    pub fn decode_mask(&self, embedding: &Tensor, prompt: &Tensor) -> Result<Tensor> {
        Ok(self.decode_masks_with(embedding, std::slice::from_ref(prompt), Kernels::Float)?.remove(0))
    }

    /// Decode several prompts against one image embedding.
    pub fn decode_masks_with(&self, embedding: &Tensor, prompts: &[Tensor], kernels: Kernels) -> Result<Vec<Tensor>> {
        let (d, g) = (self.config.embed_dim, self.config.grid());
        if embedding.shape() != [d, g, g] {
            return Err(Error::shape(format!("embedding must be {d}×{g}×{g}, got {:?}", embedding.shape())));
        }
        let mut ctx = Ctx::new(self, kernels.tape(), Trainable::none());
        let e = ctx.tape.constant(embedding.clone().reshape(&[d, g * g])?);
        let tokens = ctx.tape.transpose(e)?;
        let shared = decoder::Shared::new(&mut ctx, tokens)?;
        let mut out = Vec::with_capacity(prompts.len());
        for p in prompts {
            if p.shape() != [2, d] {
                return Err(Error::shape(format!("prompt embedding must be 2×{d}, got {:?}", p.shape())));
            }
            let pv = ctx.tape.constant(p.clone());
            let logits = decoder::forward(&mut ctx, &shared, pv)?;
            out.push(ctx.tape.value(logits).clone());
        }
        Ok(out)
    }

    /// Full forward for one image and box (model-input pixel coordinates).
    pub fn predict(&self, image: &Tensor, b: Box2D, kernels: Kernels) -> Result<Tensor> {
        self.check_image(image)?;
        let mut ctx = Ctx::new(self, kernels.tape(), Trainable::none());
        let out = ctx.forward(image, b)?;
        Ok(ctx.tape.value(out.logits).clone())
    }
}
