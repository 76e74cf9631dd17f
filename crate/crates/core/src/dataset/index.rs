//! Cumulative-z lookup from a global slice id to `(volume, z)`.

use rand::seq::SliceRandom;

use super::container::VolumeStore;
use crate::error::{Error, Module, Result};
use crate::rng;

/// Prefix-sum index over a list of volumes' z extents.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceIndex {
    volumes: Vec<usize>,
    extents: Vec<usize>,
    prefix: Vec<usize>,
    total: usize,
}

impl SliceIndex {
    /// `volumes[i]` is the store id of the i-th entry with `extents[i]` slices.
    pub fn new(volumes: Vec<usize>, extents: Vec<usize>) -> Result<SliceIndex> {
        if volumes.len() != extents.len() {
            return Err(Error::contract(Module::Dataset, "one extent per volume"));
        }
        if extents.iter().any(|&e| e == 0) {
            return Err(Error::contract(Module::Dataset, "z extents must be positive"));
        }
        let mut prefix = Vec::with_capacity(extents.len());
        let mut total = 0;
        for &e in &extents {
            prefix.push(total);
            total += e;
        }
        Ok(SliceIndex { volumes, extents, prefix, total })
    }

    pub fn from_extents(extents: &[usize]) -> Result<SliceIndex> {
        SliceIndex::new((0..extents.len()).collect(), extents.to_vec())
    }

    pub fn total_slices(&self) -> usize {
        self.total
    }

    pub fn num_volumes(&self) -> usize {
        self.volumes.len()
    }

    pub fn volumes(&self) -> &[usize] {
        &self.volumes
    }

    pub fn extents(&self) -> &[usize] {
        &self.extents
    }

    pub fn prefix(&self) -> &[usize] {
        &self.prefix
    }

    /// `(volume_id, z)` for a global slice id.
    pub fn locate(&self, global: usize) -> Result<(usize, usize)> {
        self.locate_counted(global).map(|(r, _)| r)
    }

    /// As [`SliceIndex::locate`], also returning the number of prefix-array probes.
    pub fn locate_counted(&self, global: usize) -> Result<((usize, usize), usize)> {
        if global >= self.total {
            return Err(Error::Index { index: global, len: self.total });
        }
        // Invariant: prefix[lo] <= global < prefix[hi] (prefix[len] = total).
        let (mut lo, mut hi, mut probes) = (0, self.prefix.len(), 0);
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            probes += 1;
            if self.prefix[mid] <= global {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(((self.volumes[lo], global - self.prefix[lo]), probes))
    }
}

/// Per-modality slice indices, in order of first appearance in the store.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub modalities: Vec<(String, SliceIndex)>,
}

impl DatasetIndex {
    pub fn build(store: &VolumeStore, volumes: impl IntoIterator<Item = usize>) -> Result<DatasetIndex> {
        let mut groups: Vec<(String, Vec<usize>, Vec<usize>)> = Vec::new();
        for v in volumes {
            let e = store.entry(v)?;
            let g = match groups.iter_mut().position(|g| g.0 == e.modality) {
                Some(i) => &mut groups[i],
                None => {
                    groups.push((e.modality.clone(), Vec::new(), Vec::new()));
                    groups.last_mut().unwrap()
                }
            };
            g.1.push(v);
            g.2.push(e.depth);
        }
        let modalities =
            groups.into_iter().map(|(n, v, e)| Ok((n, SliceIndex::new(v, e)?))).collect::<Result<Vec<_>>>()?;
        Ok(DatasetIndex { modalities })
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.modalities.iter().map(|(_, i)| i.total_slices()).collect()
    }

    pub fn names(&self) -> Vec<&str> {
        self.modalities.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn total_slices(&self) -> usize {
        self.sizes().iter().sum()
    }
}

/// Train / evaluation partition by volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: DatasetIndex,
    pub eval: DatasetIndex,
}

/// Hold out `⌊n / eval_denominator⌋` volumes per modality (at least one when
/// a modality has two or more), picked by a seeded shuffle.
pub fn split(store: &VolumeStore, eval_denominator: usize, seed: u64) -> Result<Split> {
    if eval_denominator < 2 {
        return Err(Error::config(Module::Dataset, "evaluation split denominator must be >= 2"));
    }
    let all = DatasetIndex::build(store, 0..store.len())?;
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for (name, idx) in &all.modalities {
        let mut vols = idx.volumes().to_vec();
        vols.shuffle(&mut rng::stream(seed, &format!("split/{name}")));
        let n_eval = if vols.len() >= 2 { (vols.len() / eval_denominator).max(1) } else { 0 };
        let (e, t) = vols.split_at(n_eval);
        let (mut e, mut t) = (e.to_vec(), t.to_vec());
        e.sort_unstable();
        t.sort_unstable();
        eval.extend(e);
        train.extend(t);
    }
    train.sort_unstable();
    eval.sort_unstable();
    Ok(Split { train: DatasetIndex::build(store, train)?, eval: DatasetIndex::build(store, eval)? })
}
