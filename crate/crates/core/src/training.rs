//! Float pre-training and the three-stage quantization-aware protocol.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{load_sample, sample_epoch, SampleRef, SamplerConfig, Split, VolumeStore};
use crate::error::{Error, Module, Result};
use crate::exec::Exec;
use crate::inference::{cases_from_store, evaluate, Case, RunOptions};
use crate::losses::{compound, distill_loss, LossConfig};
use crate::metrics::{MetricConfig, Report};
use crate::model::{is_buffer, Ctx, Group, Kernels, Model, Trainable};
use crate::quant::SCALE_FLOOR;
use crate::rng;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub initial_lr: f64,
    pub warmup_epochs: usize,
    pub anneal_epochs: usize,
    pub warmup_start_fraction: f64,
    pub min_lr_fraction: f64,
    /// Run `warmup + anneal − 1` epochs by letting the last warm-up step
    /// stand in for the first annealing step.
    pub overlap_boundary: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            initial_lr: 0.01,
            warmup_epochs: 5,
            anneal_epochs: 10,
            warmup_start_fraction: 0.01,
            min_lr_fraction: 0.001,
            overlap_boundary: false,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs < 1 || self.anneal_epochs < 2 {
            return Err(Error::config(Module::Training, "need warmup_epochs >= 1 and anneal_epochs >= 2"));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::config(Module::Training, "initial_lr must be positive"));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.warmup_epochs + self.anneal_epochs - self.overlap_boundary as usize
    }

    /// Learning rate for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs() {
            return Err(Error::contract(
                Module::Training,
                format!("epoch {epoch} outside a {}-epoch schedule", self.total_epochs()),
            ));
        }
        let lr0 = self.initial_lr;
        let (nw, na) = (self.warmup_epochs, self.anneal_epochs);
        if epoch < nw {
            let f = self.warmup_start_fraction;
            return Ok(lr0 * (f + (1.0 - f) * epoch as f64 / nw as f64));
        }
        let k = epoch - nw + self.overlap_boundary as usize;
        let lr_min = self.min_lr_fraction * lr0;
        let c = (std::f64::consts::PI * k as f64 / (na - 1) as f64).cos();
        Ok(lr_min + (lr0 - lr_min) / 2.0 * (1.0 + c))
    }
}

/// SGD with heavy-ball momentum: `v ← μv + g; p ← p − lr·v`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sgd {
    pub momentum: f64,
    buffers: BTreeMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Sgd {
        Sgd { momentum, buffers: BTreeMap::new() }
    }

    pub fn step(&mut self, name: &str, param: &mut [f32], grad: &[f32], lr: f64) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::shape(format!("`{name}`: {} parameters vs {} gradients", param.len(), grad.len())));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            log::error!("non-finite gradient for `{name}` at element {i}: {}", grad[i]);
            return Err(Error::NonFinite { param: name.to_string() });
        }
        let v = self.buffers.entry(name.to_string()).or_insert_with(|| vec![0.0; grad.len()]);
        let (mu, lr) = (self.momentum as f32, lr as f32);
        for ((p, v), &g) in param.iter_mut().zip(v.iter_mut()).zip(grad) {
            *v = mu * *v + g;
            *p -= lr * *v;
        }
        Ok(())
    }

    pub fn buffer(&self, name: &str) -> Option<&[f32]> {
        self.buffers.get(name).map(|v| v.as_slice())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StagePlan {
    pub stage: u8,
    pub trainable: Trainable,
    pub batch_size: usize,
    pub distill: bool,
}

impl StagePlan {
    pub fn new(stage: u8, batch_sizes: [usize; 4]) -> Result<StagePlan> {
        let t = |encoder, prompt, decoder| Trainable { encoder, prompt, decoder };
        let (trainable, distill) = match stage {
            0 => (t(true, true, true), false),
            1 => (t(true, false, false), true),
            2 => (t(false, false, true), false),
            3 => (t(true, true, true), false),
            s => return Err(Error::config(Module::Training, format!("unknown stage {s}"))),
        };
        let batch_size = batch_sizes[stage as usize];
        if batch_size == 0 {
            return Err(Error::config(Module::Training, "batch sizes must be >= 1"));
        }
        Ok(StagePlan { stage, trainable, batch_size, distill })
    }

    pub fn frozen(&self) -> Vec<Group> {
        Group::ALL.into_iter().filter(|&g| !self.trainable.contains(g)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
    pub metric: MetricConfig,
    pub momentum: f64,
    /// Batch size for stages 0–3.
    pub batch_sizes: [usize; 4],
    /// One in this many volumes per modality is held out for evaluation.
    pub eval_denominator: usize,
    /// Evaluate at most this many held-out volumes per modality each epoch.
    pub eval_cap_per_modality: Option<usize>,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            schedule: ScheduleConfig::default(),
            loss: LossConfig::default(),
            sampler: SamplerConfig::default(),
            metric: MetricConfig::default(),
            momentum: 0.9,
            batch_sizes: [2, 2, 4, 2],
            eval_denominator: 10,
            eval_cap_per_modality: None,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.loss.validate()?;
        self.metric.validate()?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(Module::Training, "momentum must be in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.sampler.flip_prob) {
            return Err(Error::config(Module::Training, "flip_prob must be in [0, 1]"));
        }
        Ok(())
    }

    pub fn exec(&self) -> Exec {
        Exec::select(self.deterministic)
    }
}

/// Store, split and the held-out evaluation cases.
pub struct TrainData<'a> {
    pub store: &'a VolumeStore,
    pub split: Split,
    pub eval_cases: Vec<Case>,
}

impl<'a> TrainData<'a> {
    pub fn new(store: &'a VolumeStore, cfg: &TrainConfig) -> Result<TrainData<'a>> {
        let split = crate::dataset::split(store, cfg.eval_denominator, cfg.seed)?;
        let eval_vols: Vec<usize> = split.eval.modalities.iter().flat_map(|(_, i)| i.volumes().to_vec()).collect();
        let eval_cases = cases_from_store(store, &eval_vols, cfg.eval_cap_per_modality)?;
        if eval_cases.is_empty() {
            return Err(Error::config(Module::Training, "evaluation split is empty"));
        }
        Ok(TrainData { store, split, eval_cases })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: u8,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_dsc: f64,
    pub eval_nsd: f64,
    pub wall_s: f64,
}

pub const LOG_HEADER: &str = "epoch,stage,lr,train_loss,eval_dsc,eval_nsd,wall_s";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{:.6},{:.6},{:.6},{:.3}",
            self.epoch, self.stage, self.lr, self.train_loss, self.eval_dsc, self.eval_nsd, self.wall_s
        )
    }
}

pub fn log_csv(logs: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for l in logs {
        s.push_str(&l.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone)]
pub struct StageResult {
    pub stage: u8,
    pub logs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best: Model,
    pub best_report: Report,
    pub checkpoints: usize,
}

impl StageResult {
    pub fn best_dsc(&self) -> f64 {
        self.logs[self.best_epoch].eval_dsc
    }
}

/// Index of the maximum value; ties go to the earliest.
pub fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.map_or(true, |b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// FNV-1a over the names and bit patterns of a group's parameters and
/// quantizer scales.
pub fn group_fingerprint(model: &Model, group: Group) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    for (name, t) in model.params() {
        if Group::of(name) == group {
            eat(name.as_bytes());
            for v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
    }
    for (name, q) in model.quantizers() {
        if Group::of(name) == group {
            eat(name.as_bytes());
            eat(&q.scale.to_bits().to_le_bytes());
            eat(&[q.calibrated as u8]);
        }
    }
    h
}

struct SampleGrad {
    loss: f64,
    params: Vec<(String, Vec<f32>)>,
    scales: Vec<(String, f32)>,
}

fn teacher_tokens(teacher: &Model, image: &Tensor) -> Result<Tensor> {
    let e = teacher.encode_image(image)?;
    let (d, g) = (e.shape()[0], e.shape()[1]);
    crate::tensor::transpose(&e.reshape(&[d, g * g])?, &[1, 0])
}

fn sample_grad(
    model: &Model,
    teacher: Option<&Model>,
    plan: &StagePlan,
    cfg: &TrainConfig,
    sample: &crate::dataset::Sample,
) -> Result<SampleGrad> {
    let mut ctx = Ctx::new(model, Tape::new(), plan.trainable);
    let out = ctx.forward(&sample.image, sample.prompt)?;
    let seg = compound(ctx.tape.value(out.logits).data(), &sample.mask, &cfg.loss)?;
    let (loss, var) = match (plan.distill, teacher) {
        (true, Some(t)) => {
            let tt = teacher_tokens(t, &sample.image)?;
            let d = distill_loss(ctx.tape.value(out.embedding).data(), tt.data())?;
            let w = cfg.loss.distill_weight;
            let dg: Vec<f32> = d.grad.iter().map(|&g| (w * g as f64) as f32).collect();
            let total = seg.value + w * d.value;
            (total, ctx.tape.external(&[out.logits, out.embedding], total as f32, vec![seg.grad, dg])?)
        }
        (true, None) => return Err(Error::config(Module::Training, "distillation requires a teacher model")),
        _ => (seg.value, ctx.tape.external(&[out.logits], seg.value as f32, vec![seg.grad])?),
    };
    let grads = ctx.tape.backward(var)?;
    let mut params = Vec::new();
    for (name, &v) in ctx.bound_params() {
        if !is_buffer(name) && plan.trainable.contains(Group::of(name)) {
            if let Some(g) = grads.get(v) {
                params.push((name.clone(), g.to_vec()));
            }
        }
    }
    let mut scales = Vec::new();
    for (name, &v) in ctx.bound_scales() {
        if plan.trainable.contains(Group::of(name)) {
            if let Some(g) = grads.get(v) {
                scales.push((name.clone(), g[0]));
            }
        }
    }
    Ok(SampleGrad { loss, params, scales })
}

fn epoch_stream_id(stage: u8, epoch: usize) -> u64 {
    stage as u64 * 10_000 + epoch as u64
}

fn load_batch(
    data: &TrainData,
    cfg: &TrainConfig,
    refs: &[SampleRef],
    stage: u8,
    epoch: usize,
    offset: usize,
    target: usize,
) -> Result<Vec<crate::dataset::Sample>> {
    refs.iter()
        .enumerate()
        .map(|(i, r)| {
            let id = epoch_stream_id(stage, epoch) * 1_000_000 + (offset + i) as u64;
            let mut g = rng::indexed_stream(cfg.seed, "augment", id);
            load_sample(data.store, *r, target, Some((&mut g, cfg.sampler.flip_prob)))
        })
        .collect()
}

/// Apply the quantization setup a stage needs before its first step.
fn prepare_stage(model: &mut Model, plan: &StagePlan, data: &TrainData, cfg: &TrainConfig) -> Result<()> {
    let group = match plan.stage {
        1 => Some(Group::Encoder),
        2 => Some(Group::Decoder),
        _ => None,
    };
    if let Some(g) = group {
        if !model.is_quantized(g) {
            model.enable_quantization(g)?;
        }
        let refs = sample_epoch(&sampler_for(cfg, plan.stage), &data.split.train, epoch_stream_id(plan.stage, 0))?;
        let n = plan.batch_size.min(refs.len());
        let batch = load_batch(data, cfg, &refs[..n], plan.stage, 0, 0, model.config().image_size)?;
        let samples: Vec<_> = batch.into_iter().map(|s| (s.image, s.prompt)).collect();
        let calibrated = model.calibrate_activations(&samples)?;
        log::info!("stage {}: calibrated {calibrated} activation quantizers", plan.stage);
    }
    Ok(())
}

fn sampler_for(cfg: &TrainConfig, stage: u8) -> SamplerConfig {
    SamplerConfig { seed: rng::derive_indexed(cfg.seed, "sampler", stage as u64), ..cfg.sampler.clone() }
}

/// Evaluate on the held-out cases (mean DSC is the unweighted mean of
/// per-modality means).
pub fn evaluate_model(model: &Model, data: &TrainData, cfg: &TrainConfig) -> Result<Report> {
    let opts = RunOptions { kernels: Kernels::Float, exec: cfg.exec(), ..RunOptions::default() };
    Ok(evaluate(model, &data.eval_cases, &opts, &cfg.metric)?.0)
}

/// Train one stage for the full schedule and return the best epoch.
pub fn run_stage(
    plan: StagePlan,
    model: &Model,
    teacher: Option<&Model>,
    data: &TrainData,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog, &Model) -> Result<()>,
) -> Result<StageResult> {
    run_stage_inner(plan, model, teacher, data, cfg, on_epoch).map_err(|e| match e {
        Error::Stage { .. } => e,
        e => Error::Stage { stage: plan.stage, source: Box::new(e) },
    })
}

fn run_stage_inner(
    plan: StagePlan,
    model: &Model,
    teacher: Option<&Model>,
    data: &TrainData,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog, &Model) -> Result<()>,
) -> Result<StageResult> {
    cfg.validate()?;
    let mut model = model.clone();
    prepare_stage(&mut model, &plan, data, cfg)?;
    let frozen: Vec<(Group, u64)> = plan.frozen().into_iter().map(|g| (g, group_fingerprint(&model, g))).collect();
    let exec = cfg.exec();
    let sampler = sampler_for(cfg, plan.stage);
    let target = model.config().image_size;
    let mut opt = Sgd::new(cfg.momentum);
    let mut logs: Vec<EpochLog> = Vec::new();
    let mut best: Option<(usize, Model, Report)> = None;

    for epoch in 0..cfg.schedule.total_epochs() {
        let start = Instant::now();
        let lr = cfg.schedule.lr_at(epoch)?;
        let refs = sample_epoch(&sampler, &data.split.train, epoch_stream_id(plan.stage, epoch))?;
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (b, chunk) in refs.chunks(plan.batch_size).enumerate() {
            let batch = load_batch(data, cfg, chunk, plan.stage, epoch, b * plan.batch_size, target)?;
            let grads = exec.map(&batch, |s| sample_grad(&model, teacher, &plan, cfg, s));
            let n = batch.len() as f32;
            let mut psum: BTreeMap<String, Vec<f32>> = BTreeMap::new();
            let mut ssum: BTreeMap<String, f32> = BTreeMap::new();
            for g in grads {
                let g = g?;
                if !g.loss.is_finite() {
                    return Err(Error::NonFinite { param: "loss".into() });
                }
                loss_sum += g.loss;
                seen += 1;
                for (name, v) in g.params {
                    let acc = psum.entry(name).or_insert_with(|| vec![0.0; v.len()]);
                    for (a, x) in acc.iter_mut().zip(&v) {
                        *a += x;
                    }
                }
                for (name, v) in g.scales {
                    *ssum.entry(name).or_insert(0.0) += v;
                }
            }
            for (name, mut g) in psum {
                g.iter_mut().for_each(|x| *x /= n);
                let p = model.params_mut().get_mut(&name).expect("bound parameter exists");
                opt.step(&name, p.data_mut(), &g, lr)?;
            }
            for (name, g) in ssum {
                let q = model.quantizers_mut().get_mut(&name).expect("bound scale exists");
                let mut s = [q.scale];
                opt.step(&format!("scale:{name}"), &mut s, &[g / n], lr)?;
                q.scale = s[0].max(SCALE_FLOOR);
            }
        }
        let report = evaluate_model(&model, data, cfg)?;
        let log = EpochLog {
            epoch,
            stage: plan.stage,
            lr,
            train_loss: loss_sum / seen.max(1) as f64,
            eval_dsc: report.average.dsc,
            eval_nsd: report.average.nsd,
            wall_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "stage {} epoch {epoch}: lr {:.2e} loss {:.4} dsc {:.4} nsd {:.4} ({:.1}s)",
            plan.stage,
            lr,
            log.train_loss,
            log.eval_dsc,
            log.eval_nsd,
            log.wall_s
        );
        on_epoch(&log, &model)?;
        if best.as_ref().map_or(true, |(b, ..)| log.eval_dsc > logs[*b].eval_dsc) {
            best = Some((epoch, model.clone(), report));
        }
        logs.push(log);
    }
    for (g, h) in frozen {
        if group_fingerprint(&model, g) != h {
            return Err(Error::contract(Module::Training, format!("frozen {} changed during stage {}", g.label(), plan.stage)));
        }
    }
    let (best_epoch, best, best_report) = best.expect("schedule has at least one epoch");
    Ok(StageResult { stage: plan.stage, checkpoints: logs.len(), logs, best_epoch, best, best_report })
}

/// Stage-0 float pre-training from a fresh model.
pub fn train_float(
    model: &Model,
    data: &TrainData,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog, &Model) -> Result<()>,
) -> Result<StageResult> {
    if model.is_quantized(Group::Encoder) || model.is_quantized(Group::Decoder) {
        return Err(Error::config(Module::Training, "stage 0 trains a float model"));
    }
    run_stage(StagePlan::new(0, cfg.batch_sizes)?, model, None, data, cfg, on_epoch)
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub stages: Vec<StageResult>,
    pub final_model: Model,
    pub final_report: Report,
}

impl PipelineResult {
    pub fn logs(&self) -> Vec<EpochLog> {
        self.stages.iter().flat_map(|s| s.logs.clone()).collect()
    }

    pub fn report(&self) -> String {
        let mut s = String::new();
        for st in &self.stages {
            let _ = writeln!(s, "## Stage {}", st.stage);
            let _ = writeln!(s, "best epoch {} (eval DSC {:.4})", st.best_epoch, st.best_dsc());
            s.push_str(&log_csv(&st.logs));
            s.push('\n');
        }
        let _ = writeln!(s, "## Final evaluation");
        s.push_str(&self.final_report.to_table());
        s
    }
}

/// Stages that need to run before `stage` can start, given what is available.
pub fn check_prerequisites(stage: u8, have_float: bool, have_previous: bool) -> Result<()> {
    if !have_float {
        return Err(Error::config(Module::Training, format!("stage {stage} needs a stage-0 float model")));
    }
    if stage >= 2 && !have_previous {
        return Err(Error::config(Module::Training, format!("stage {stage} needs the best stage-{} checkpoint", stage - 1)));
    }
    Ok(())
}

/// Run QAT stages `stages` (a subrange of 1..=3) starting from `start`
/// (the float model for stage 1, or the previous stage's best model).
pub fn run_qat(
    float: &Model,
    start: &Model,
    stages: &[u8],
    data: &TrainData,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog, &Model) -> Result<()>,
) -> Result<PipelineResult> {
    if stages.is_empty() || stages.iter().any(|s| !(1..=3).contains(s)) || stages.windows(2).any(|w| w[1] != w[0] + 1) {
        return Err(Error::config(Module::Training, "QAT stages must be a consecutive run within 1..=3"));
    }
    let mut current = start.clone();
    if stages[0] >= 2 && !current.is_quantized(Group::Encoder) {
        return Err(Error::config(
            Module::Training,
            format!("stage {} needs the best stage-{} checkpoint (a quantized encoder)", stages[0], stages[0] - 1),
        ));
    }
    let mut results = Vec::new();
    for &s in stages {
        let plan = StagePlan::new(s, cfg.batch_sizes)?;
        let r = run_stage(plan, &current, Some(float), data, cfg, on_epoch)?;
        current = r.best.clone();
        results.push(r);
    }
    let final_report = results.last().unwrap().best_report.clone();
    Ok(PipelineResult { stages: results, final_model: current, final_report })
}
