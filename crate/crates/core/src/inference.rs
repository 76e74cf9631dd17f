//! Case-level inference: 3D box expansion, one embedding per slice,
//! bounded box batches and mask post-processing.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::boxes::{Box2D, Box3D};
use crate::dataset::{object_masks, preprocess, preprocess::nearest, slice_to_tensor, Transform, VolumeStore};
use crate::error::{Error, Module, Result};
use crate::exec::Exec;
use crate::metrics::{dsc, dsc_3d, nsd, nsd_3d, CaseMetrics, MetricConfig, Report};
use crate::model::{Kernels, Model};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchLimits {
    pub max_box_batch: usize,
}

impl Default for BatchLimits {
    fn default() -> Self {
        BatchLimits { max_box_batch: 64 }
    }
}

impl BatchLimits {
    pub fn validate(&self) -> Result<()> {
        if self.max_box_batch == 0 {
            return Err(Error::config(Module::Inference, "max_box_batch must be >= 1"));
        }
        Ok(())
    }
}

/// Boxes to decode on each slice, keyed by z.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SlicePlan {
    pub slices: BTreeMap<usize, Vec<(usize, Box2D)>>,
}

impl SlicePlan {
    pub fn num_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn num_pairs(&self) -> usize {
        self.slices.values().map(Vec::len).sum()
    }

    /// `(z1, z2)` per box id, reconstructed from the plan.
    pub fn z_ranges(&self) -> BTreeMap<usize, (usize, usize)> {
        let mut out: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for (&z, items) in &self.slices {
            for &(id, _) in items {
                let e = out.entry(id).or_insert((z, z));
                e.0 = e.0.min(z);
                e.1 = e.1.max(z);
            }
        }
        out
    }
}

/// One planar box on every slice of each 3D box's z range.
pub fn expand_boxes(boxes: &[Box3D]) -> SlicePlan {
    let mut plan = SlicePlan::default();
    for (id, b) in boxes.iter().enumerate() {
        for z in b.z1..=b.z2 {
            plan.slices.entry(z).or_default().push((id, b.planar()));
        }
    }
    plan
}

/// `⌈N / max⌉` contiguous chunks of at most `max` items.
pub fn partition<T>(items: &[T], limits: BatchLimits) -> Vec<&[T]> {
    items.chunks(limits.max_box_batch.max(1)).collect()
}

/// Binarise at logit > 0, crop padding, nearest-neighbour resize to the
/// original extent.
pub fn postprocess(logits: &[f32], t: &Transform) -> Result<Vec<u8>> {
    let s = t.target;
    if logits.len() != s * s || t.resized_h > s || t.resized_w > s || t.resized_h == 0 || t.resized_w == 0 {
        return Err(Error::contract(Module::Inference, "logits do not match the transform record"));
    }
    let (rh, rw) = (t.resized_h, t.resized_w);
    let mut crop = Vec::with_capacity(rh * rw);
    for y in 0..rh {
        crop.extend(logits[y * s..][..rw].iter().map(|&l| (l > 0.0) as u8));
    }
    Ok(nearest(&crop, rh, rw, t.orig_h, t.orig_w))
}

/// One image or volume with its prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub id: String,
    pub modality: String,
    /// Raw `C × H × W` slices.
    pub slices: Vec<Tensor>,
    pub boxes: Vec<Box3D>,
    /// Per box, per slice binary masks over the whole depth.
    pub ground_truth: Option<Vec<Vec<Vec<u8>>>>,
}

impl Case {
    pub fn from_store(store: &VolumeStore, volume: usize) -> Result<Case> {
        let e = store.entry(volume)?;
        let slices = (0..e.depth).map(|z| slice_to_tensor(&store.read_slice(volume, z)?)).collect::<Result<Vec<_>>>()?;
        let gt = e.objects.iter().map(|(id, _)| object_masks(store, volume, *id)).collect::<Result<Vec<_>>>()?;
        Ok(Case {
            id: format!("{}-{volume}", e.modality),
            modality: e.modality.clone(),
            slices,
            boxes: e.objects.iter().map(|(_, b)| *b).collect(),
            ground_truth: Some(gt),
        })
    }

    pub fn is_3d(&self) -> bool {
        self.slices.len() > 1
    }

    pub fn dims(&self) -> Result<(usize, usize)> {
        match self.slices.first().map(|s| s.shape().to_vec()).as_deref() {
            Some([_, h, w]) => Ok((*h, *w)),
            _ => Err(Error::contract(Module::Inference, format!("case `{}` has no C×H×W slices", self.id))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.dims()?;
        if self.slices.iter().any(|s| s.shape()[1..] != [h, w]) {
            return Err(Error::contract(Module::Inference, "slices differ in size"));
        }
        for b in &self.boxes {
            b.validate()?;
            if b.z2 >= self.slices.len() {
                return Err(Error::contract(Module::Inference, format!("box {b:?} exceeds depth {}", self.slices.len())));
            }
        }
        Ok(())
    }
}

/// How embeddings are obtained per (box, slice) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// One encoder call per touched slice, shared by all its boxes.
    #[default]
    Cached,
    /// Recompute the embedding for every (box, slice) pair.
    Recompute,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunOptions {
    pub limits: BatchLimits,
    pub kernels: Kernels,
    pub mode: Mode,
    pub exec: Exec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseOutput {
    /// Per box, per slice masks at original resolution (empty outside the box's z range).
    pub masks: Vec<Vec<Vec<u8>>>,
    pub encoder_calls: usize,
    pub decoder_calls: usize,
    /// Largest number of boxes decoded together.
    pub peak_batch: usize,
    pub encoder_s: f64,
    pub decoder_s: f64,
    pub wall_s: f64,
}

struct SliceResult {
    z: usize,
    masks: Vec<(usize, Vec<u8>)>,
    encoder_calls: usize,
    decoder_calls: usize,
    peak: usize,
    enc_s: f64,
    dec_s: f64,
}

fn run_slice(model: &Model, slice: &Tensor, z: usize, items: &[(usize, Box2D)], opts: &RunOptions) -> Result<SliceResult> {
    let s = model.config().image_size;
    let (x, t) = preprocess(slice, s)?;
    let mut r = SliceResult { z, masks: Vec::with_capacity(items.len()), encoder_calls: 0, decoder_calls: 0, peak: 0, enc_s: 0.0, dec_s: 0.0 };
    let encode = |r: &mut SliceResult| -> Result<Tensor> {
        let t0 = Instant::now();
        let e = model.encode_image_with(&x, opts.kernels)?;
        r.enc_s += t0.elapsed().as_secs_f64();
        r.encoder_calls += 1;
        Ok(e)
    };
    let cached = match opts.mode {
        Mode::Cached => Some(encode(&mut r)?),
        Mode::Recompute => None,
    };
    let chunk_limits = match opts.mode {
        Mode::Cached => opts.limits,
        Mode::Recompute => BatchLimits { max_box_batch: 1 },
    };
    for chunk in partition(items, chunk_limits) {
        let emb = match &cached {
            Some(e) => e.clone(),
            None => encode(&mut r)?,
        };
        let t0 = Instant::now();
        let prompts = chunk.iter().map(|(_, b)| model.encode_prompt(t.box_to_model(*b))).collect::<Result<Vec<_>>>()?;
        let logits = model.decode_masks_with(&emb, &prompts, opts.kernels)?;
        r.dec_s += t0.elapsed().as_secs_f64();
        r.decoder_calls += 1;
        r.peak = r.peak.max(chunk.len());
        for ((id, _), l) in chunk.iter().zip(logits) {
            r.masks.push((*id, postprocess(l.data(), &t)?));
        }
    }
    Ok(r)
}

/// Segment every box of a case.
pub fn run_case(model: &Model, case: &Case, opts: &RunOptions) -> Result<CaseOutput> {
    opts.limits.validate()?;
    case.validate()?;
    let start = Instant::now();
    let (h, w) = case.dims()?;
    let plan = expand_boxes(&case.boxes);
    let entries: Vec<(usize, &Vec<(usize, Box2D)>)> = plan.slices.iter().map(|(&z, v)| (z, v)).collect();
    let results = opts.exec.map(&entries, |&(z, items)| {
        run_slice(model, &case.slices[z], z, items, opts).map_err(|e| Error::Case { z, source: Box::new(e) })
    });
    let mut out = CaseOutput {
        masks: vec![vec![vec![0u8; h * w]; case.slices.len()]; case.boxes.len()],
        encoder_calls: 0,
        decoder_calls: 0,
        peak_batch: 0,
        encoder_s: 0.0,
        decoder_s: 0.0,
        wall_s: 0.0,
    };
    for r in results {
        let r = r?;
        out.encoder_calls += r.encoder_calls;
        out.decoder_calls += r.decoder_calls;
        out.peak_batch = out.peak_batch.max(r.peak);
        out.encoder_s += r.enc_s;
        out.decoder_s += r.dec_s;
        for (id, m) in r.masks {
            out.masks[id][r.z] = m;
        }
    }
    out.wall_s = start.elapsed().as_secs_f64();
    Ok(out)
}

/// Score a case's predicted masks against its ground truth, one row per box.
pub fn score_case(case: &Case, masks: &[Vec<Vec<u8>>], runtime_s: f64, cfg: &MetricConfig) -> Result<Vec<CaseMetrics>> {
    let gt = case
        .ground_truth
        .as_ref()
        .ok_or_else(|| Error::contract(Module::Metrics, format!("case `{}` has no ground truth (inference only)", case.id)))?;
    let (h, w) = case.dims()?;
    gt.iter()
        .zip(masks)
        .map(|(g, p)| {
            let (d, n) = if case.is_3d() {
                (dsc_3d(p, g)?, nsd_3d(p, g, h, w, cfg)?)
            } else {
                (dsc(&p[0], &g[0])?, nsd(&p[0], &g[0], h, w, cfg)?)
            };
            Ok(CaseMetrics { modality: case.modality.clone(), dsc: d, nsd: n, runtime_s })
        })
        .collect()
}

/// Run and score a case.
pub fn evaluate_case(model: &Model, case: &Case, opts: &RunOptions, cfg: &MetricConfig) -> Result<Vec<CaseMetrics>> {
    let out = run_case(model, case, opts)?;
    score_case(case, &out.masks, out.wall_s, cfg)
}

/// Evaluate a set of cases; cases are independent, so they run in parallel
/// under a parallel executor (slices within a case then run sequentially).
pub fn evaluate(model: &Model, cases: &[Case], opts: &RunOptions, cfg: &MetricConfig) -> Result<(Report, Vec<CaseMetrics>)> {
    let inner = RunOptions { exec: Exec::Sequential, ..*opts };
    let per_case = opts.exec.map(cases, |c| evaluate_case(model, c, &inner, cfg));
    let mut all = Vec::new();
    for r in per_case {
        all.extend(r?);
    }
    Ok((Report::from_cases(&all), all))
}

/// Eval cases for volumes of a store, at most `cap` volumes per modality.
pub fn cases_from_store(store: &VolumeStore, volumes: &[usize], cap: Option<usize>) -> Result<Vec<Case>> {
    let mut taken: BTreeMap<String, usize> = BTreeMap::new();
    let mut out = Vec::new();
    for &v in volumes {
        let e = store.entry(v)?;
        let n = taken.entry(e.modality.clone()).or_default();
        if cap.is_some_and(|c| *n >= c) {
            continue;
        }
        *n += 1;
        out.push(Case::from_store(store, v)?);
    }
    Ok(out)
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub case: String,
    pub boxes: usize,
    pub slices: usize,
    pub float_s: f64,
    pub integer_s: f64,
    pub encoder_s: f64,
    pub decoder_s: f64,
    pub encoder_calls: usize,
    pub recompute_encoder_calls: usize,
}

/// Median timings over `repetitions` runs after one warm-up run.
pub fn bench(model: &Model, cases: &[Case], repetitions: usize, limits: BatchLimits) -> Result<Vec<BenchRow>> {
    let reps = repetitions.max(1);
    let mut rows = Vec::with_capacity(cases.len());
    for c in cases {
        let timing = |kernels: Kernels| -> Result<(f64, f64, f64, usize)> {
            let opts = RunOptions { limits, kernels, mode: Mode::Cached, exec: Exec::Sequential };
            run_case(model, c, &opts)?;
            let (mut wall, mut enc, mut dec, mut calls) = (Vec::new(), Vec::new(), Vec::new(), 0);
            for _ in 0..reps {
                let o = run_case(model, c, &opts)?;
                wall.push(o.wall_s);
                enc.push(o.encoder_s);
                dec.push(o.decoder_s);
                calls = o.encoder_calls;
            }
            Ok((median(&wall), median(&enc), median(&dec), calls))
        };
        let (float_s, encoder_s, decoder_s, calls) = timing(Kernels::Float)?;
        let (integer_s, ..) = timing(Kernels::Integer)?;
        let recompute: usize = c.boxes.iter().map(Box3D::depth).sum();
        rows.push(BenchRow {
            case: c.id.clone(),
            boxes: c.boxes.len(),
            slices: c.slices.len(),
            float_s,
            integer_s,
            encoder_s,
            decoder_s,
            encoder_calls: calls,
            recompute_encoder_calls: recompute,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expansion_examples() {
        let p = expand_boxes(&[Box3D::new(0.0, 0.0, 2, 4.0, 4.0, 4)]);
        assert_eq!(p.slices.keys().copied().collect::<Vec<_>>(), vec![2, 3, 4]);
        let p = expand_boxes(&[Box3D::new(0.0, 0.0, 0, 4.0, 4.0, 5), Box3D::new(1.0, 1.0, 3, 4.0, 4.0, 8)]);
        assert_eq!(p.num_slices(), 9);
        for z in 3..=5 {
            assert_eq!(p.slices[&z].len(), 2);
        }
        assert_eq!(p.z_ranges()[&1], (3, 8));
        assert!(expand_boxes(&[]).slices.is_empty());
    }

    #[test]
    fn partition_examples() {
        let l = BatchLimits::default();
        let v: Vec<usize> = (0..255).collect();
        assert_eq!(partition(&v, l).iter().map(|c| c.len()).collect::<Vec<_>>(), vec![64, 64, 64, 63]);
        assert_eq!(partition(&v[..1], l).len(), 1);
        assert!(partition(&v[..0], l).is_empty());
    }

    #[test]
    fn postprocess_examples() {
        let t = Transform::new(256, 256, 256).unwrap();
        assert!(postprocess(&vec![1.0; 65536], &t).unwrap().iter().all(|&v| v == 1));
        let t = Transform::new(8, 16, 16).unwrap();
        assert_eq!((t.resized_h, t.resized_w), (8, 16));
        let mut l = vec![-1.0f32; 256];
        for v in &mut l[8 * 16..] {
            *v = 5.0;
        }
        let m = postprocess(&l, &t).unwrap();
        assert_eq!(m.len(), 8 * 16);
        assert!(m.iter().all(|&v| v == 0));
        assert!(postprocess(&l[..10], &t).is_err());
    }

    #[test]
    fn median_is_order_free() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[2.0, 3.0, 1.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
