//! Synthetic multi-modality data with known masks and boxes.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::container::{VolumeData, VolumeKind};
use crate::boxes::{Box2D, Box3D};
use crate::error::{Error, Module, Result};
use crate::rng::{self, Rng};

/// Maximum box jitter, in original pixels, applied to each coordinate.
pub const BOX_JITTER: i32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Ellipse,
    Rectangle,
    Blob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    /// Total 2D clips (3D volumes count each slice).
    pub slices: usize,
    pub kind: VolumeKind,
    /// Slices per volume; 1 for 2D images.
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub shape: ShapeFamily,
    pub foreground: Vec<f32>,
    pub background: Vec<f32>,
    pub noise: f32,
    #[serde(default = "one")]
    pub objects: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub modalities: Vec<ModalitySpec>,
}

#[allow(clippy::too_many_arguments)]
fn modality(
    name: &str,
    slices: usize,
    depth: usize,
    (height, width): (usize, usize),
    shape: ShapeFamily,
    foreground: &[f32],
    background: &[f32],
    noise: f32,
) -> ModalitySpec {
    ModalitySpec {
        name: name.into(),
        slices,
        kind: if depth > 1 { VolumeKind::Volume3D } else { VolumeKind::Image2D },
        depth,
        height,
        width,
        channels: foreground.len(),
        shape,
        foreground: foreground.to_vec(),
        background: background.to_vec(),
        noise,
        objects: 1,
    }
}

impl SynthSpec {
    fn with_sizes(seed: u64, sizes: [usize; 6]) -> SynthSpec {
        use ShapeFamily::*;
        SynthSpec {
            seed,
            modalities: vec![
                modality("ct", sizes[0], 20, (96, 96), Ellipse, &[170.0], &[70.0], 12.0),
                modality("mr", sizes[1], 15, (96, 96), Blob, &[200.0], &[90.0], 15.0),
                modality("pet", sizes[2], 10, (80, 80), Blob, &[230.0], &[40.0], 20.0),
                modality("endoscopy", sizes[3], 1, (96, 120), Ellipse, &[200.0, 90.0, 80.0], &[120.0, 60.0, 50.0], 10.0),
                modality("xray", sizes[4], 1, (112, 128), Rectangle, &[210.0], &[100.0], 14.0),
                modality("microscopy", sizes[5], 1, (96, 96), Blob, &[60.0, 160.0, 60.0], &[20.0, 30.0, 20.0], 8.0),
            ],
        }
    }

    /// Six pseudo-modalities with sizes `[2000, 900, 500, 400, 250, 200]`.
    pub fn default_six(seed: u64) -> SynthSpec {
        Self::with_sizes(seed, [2000, 900, 500, 400, 250, 200])
    }

    /// Same modalities with a 50:1 largest-to-smallest size ratio.
    pub fn imbalanced(seed: u64) -> SynthSpec {
        Self::with_sizes(seed, [2000, 600, 300, 150, 80, 40])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(Module::Dataset, m));
        if self.modalities.is_empty() {
            return bad("synthetic spec lists no modalities".into());
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if self.modalities[..i].iter().any(|o| o.name == m.name) {
                return bad(format!("duplicate modality `{}`", m.name));
            }
            if m.name.is_empty() || m.name.len() > u16::MAX as usize {
                return bad("modality names must be non-empty".into());
            }
            if m.slices == 0 || m.depth == 0 || m.slices % m.depth != 0 {
                return bad(format!("`{}`: slices {} must be a positive multiple of depth {}", m.name, m.slices, m.depth));
            }
            if (m.kind == VolumeKind::Image2D) != (m.depth == 1) {
                return bad(format!("`{}`: 2D images have depth 1 and 3D volumes depth > 1", m.name));
            }
            if m.height < 16 || m.width < 16 {
                return bad(format!("`{}`: images must be at least 16×16", m.name));
            }
            if !(m.channels == 1 || m.channels == 3) || m.foreground.len() != m.channels || m.background.len() != m.channels {
                return bad(format!("`{}`: channels must be 1 or 3 with one intensity per channel", m.name));
            }
            if !(m.noise >= 0.0 && m.noise.is_finite()) {
                return bad(format!("`{}`: noise must be a non-negative number", m.name));
            }
            if m.objects == 0 || m.objects > 8 {
                return bad(format!("`{}`: objects per volume must be in 1..=8", m.name));
            }
        }
        Ok(())
    }
}

struct Object {
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
    zc: f32,
    rz: f32,
    harmonic: (f32, f32, f32),
}

impl Object {
    fn draw(r: &mut Rng, m: &ModalitySpec) -> Object {
        let (w, h) = (m.width as f32, m.height as f32);
        let rx = r.gen_range(0.12..0.26) * w;
        let ry = r.gen_range(0.12..0.26) * h;
        let zc = (m.depth as f32 - 1.0) / 2.0 + r.gen_range(-0.1..0.1) * m.depth as f32;
        Object {
            cx: r.gen_range(rx + 2.0..w - rx - 2.0),
            cy: r.gen_range(ry + 2.0..h - ry - 2.0),
            rx,
            ry,
            zc,
            rz: m.depth as f32 * 0.7 + 0.5,
            harmonic: (r.gen_range(2.0..5.0f32).floor(), r.gen_range(0.0..std::f32::consts::TAU), r.gen_range(0.1..0.25)),
        }
    }

    fn contains(&self, shape: ShapeFamily, x: f32, y: f32, z: f32) -> bool {
        let t = (z - self.zc) / self.rz;
        let f = (1.0 - t * t).max(0.0).sqrt();
        let (rx, ry) = ((self.rx * f).max(3.0), (self.ry * f).max(3.0));
        let (dx, dy) = ((x - self.cx) / rx, (y - self.cy) / ry);
        match shape {
            ShapeFamily::Ellipse => dx * dx + dy * dy <= 1.0,
            ShapeFamily::Rectangle => dx.abs() <= 0.85 && dy.abs() <= 0.85,
            ShapeFamily::Blob => {
                let (k, phase, amp) = self.harmonic;
                let rho = (dx * dx + dy * dy).sqrt();
                let theta = dy.atan2(dx);
                rho <= 1.0 + amp * (k * theta + phase).sin() - amp
            }
        }
    }
}

fn jitter(r: &mut Rng, tight: Box2D, w: usize, h: usize) -> Box2D {
    let mut j = || r.gen_range(-BOX_JITTER..=BOX_JITTER) as f32;
    let b = Box2D::new(tight.x1 + j(), tight.y1 + j(), tight.x2 + j(), tight.y2 + j()).clamped(w, h);
    if b.x2 - b.x1 >= 2.0 && b.y2 - b.y1 >= 2.0 {
        b
    } else {
        tight
    }
}

fn generate_volume(m: &ModalitySpec, r: &mut Rng) -> Result<VolumeData> {
    let (h, w, c) = (m.height, m.width, m.channels);
    let noise = Normal::new(0.0f32, m.noise.max(1e-6)).map_err(|e| Error::config(Module::Dataset, e.to_string()))?;
    let objects: Vec<Object> = (0..m.objects).map(|_| Object::draw(r, m)).collect();
    let tilt: Vec<f32> = (0..c).map(|_| r.gen_range(-15.0..15.0)).collect();
    let mut slices = Vec::with_capacity(m.depth);
    let mut labels = Vec::with_capacity(m.depth);
    let mut tight: Vec<Option<Box2D>> = vec![None; m.objects];
    for z in 0..m.depth {
        let mut label = vec![0u8; h * w];
        for (i, o) in objects.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    if o.contains(m.shape, x as f32, y as f32, z as f32) {
                        label[y * w + x] = i as u8 + 1;
                    }
                }
            }
        }
        let mut img = vec![0u8; h * w * c];
        for (p, &l) in label.iter().enumerate() {
            let gx = (p % w) as f32 / w as f32 - 0.5;
            for ch in 0..c {
                let base = if l > 0 { m.foreground[ch] } else { m.background[ch] + tilt[ch] * gx };
                let v = base + if m.noise > 0.0 { noise.sample(r) } else { 0.0 };
                img[p * c + ch] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
        for (i, t) in tight.iter_mut().enumerate() {
            let id = i as u8 + 1;
            let obj: Vec<u8> = label.iter().map(|&l| (l == id) as u8).collect();
            if let Some(b) = Box2D::from_mask(&obj, w) {
                *t = Some(match *t {
                    None => b,
                    Some(a) => Box2D::new(a.x1.min(b.x1), a.y1.min(b.y1), a.x2.max(b.x2), a.y2.max(b.y2)),
                });
            }
        }
        slices.push(img);
        labels.push(label);
    }
    let mut boxes = Vec::new();
    for (i, t) in tight.into_iter().enumerate() {
        if let Some(t) = t {
            // z extent: slices on which the object is visible.
            let id = i as u8 + 1;
            let zs: Vec<usize> = (0..m.depth).filter(|&z| labels[z].contains(&id)).collect();
            let b = jitter(r, t, w, h);
            boxes.push((id, Box3D::new(b.x1, b.y1, zs[0], b.x2, b.y2, *zs.last().unwrap())));
        }
    }
    Ok(VolumeData { modality: m.name.clone(), kind: m.kind, channels: c, height: h, width: w, slices, labels, objects: boxes })
}

/// All volumes of the spec, modality by modality.
pub fn generate(spec: &SynthSpec) -> Result<Vec<VolumeData>> {
    spec.validate()?;
    let mut out = Vec::new();
    for m in &spec.modalities {
        for v in 0..m.slices / m.depth {
            let mut r = rng::indexed_stream(spec.seed, &format!("synth/{}", m.name), v as u64);
            out.push(generate_volume(m, &mut r)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        assert!(SynthSpec::default_six(1).validate().is_ok());
        let mut s = SynthSpec::default_six(1);
        s.modalities[0].slices = 2001;
        assert!(matches!(s.validate(), Err(Error::Config { .. })));
        let mut s = SynthSpec::default_six(1);
        s.modalities[3].depth = 4;
        assert!(s.validate().is_err());
        assert!(SynthSpec { seed: 0, modalities: vec![] }.validate().is_err());
    }

    #[test]
    fn every_slice_of_a_volume_has_foreground() {
        let mut spec = SynthSpec::default_six(3);
        for m in &mut spec.modalities {
            m.slices = m.depth * 2;
        }
        for v in generate(&spec).unwrap() {
            assert!(v.labels.iter().all(|l| l.iter().any(|&x| x > 0)));
            assert_eq!(v.objects.len(), 1);
            assert_eq!((v.objects[0].1.z1, v.objects[0].1.z2), (0, v.slices.len() - 1));
        }
    }
}
