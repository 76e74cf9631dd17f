//! Volume container, slice index, sampler, preprocessing and synthetic data.

pub mod container;
pub mod index;
pub mod preprocess;
pub mod sampler;
pub mod synth;

use rand::Rng as _;

pub use container::{Slice, VolumeData, VolumeEntry, VolumeKind, VolumeStore};
pub use index::{split, DatasetIndex, SliceIndex, Split};
pub use preprocess::{augment, preprocess, slice_to_tensor, Flips, Transform};
pub use sampler::{sample_epoch, samples_per_modality, SampleRef, SamplerConfig, Strategy};
pub use synth::{ModalitySpec, ShapeFamily, SynthSpec};

use crate::boxes::{Box2D, Box3D};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One preprocessed training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    /// Binary target, `target × target`.
    pub mask: Vec<u8>,
    /// Prompt in model-input pixels.
    pub prompt: Box2D,
    pub modality: usize,
}

/// Load, preprocess and (when `rng` is given) flip-augment one clip. The
/// prompt is the stored box of an object visible on the slice.
pub fn load_sample(
    store: &VolumeStore,
    r: SampleRef,
    target: usize,
    rng: Option<(&mut Rng, f64)>,
) -> Result<Sample> {
    let entry = store.entry(r.volume)?;
    let raw = slice_to_tensor(&store.read_slice(r.volume, r.z)?)?;
    let label = store.read_label(r.volume, r.z)?;
    let (mut image, t) = preprocess(&raw, target)?;
    let visible: Vec<(u8, Box3D)> =
        entry.objects.iter().copied().filter(|(id, b)| b.z1 <= r.z && r.z <= b.z2 && label.contains(id)).collect();
    let (mut rng, flip) = match rng {
        Some((g, p)) => (Some(g), p),
        None => (None, 0.0),
    };
    let (id, prompt) = match visible.len() {
        0 => (0, Box2D::new(0.0, 0.0, (target - 1) as f32, (target - 1) as f32)),
        n => {
            let k = rng.as_mut().map_or(0, |g| g.gen_range(0..n));
            (visible[k].0, t.box_to_model(visible[k].1.planar()))
        }
    };
    let obj: Vec<u8> = label.iter().map(|&l| (id != 0 && l == id) as u8).collect();
    let mut mask = t.mask_to_model(&obj)?;
    let prompt = match rng {
        Some(g) => {
            let f = augment(&mut image, &mut mask, g, flip)?;
            f.apply_box(prompt, target, target)
        }
        None => prompt,
    };
    Ok(Sample { image, mask, prompt, modality: r.modality })
}

/// Per-slice object mask (ids equal to `id`) for a whole volume.
pub fn object_masks(store: &VolumeStore, volume: usize, id: u8) -> Result<Vec<Vec<u8>>> {
    let e = store.entry(volume)?;
    (0..e.depth).map(|z| Ok(store.read_label(volume, z)?.into_iter().map(|l| (l == id) as u8).collect())).collect()
}
