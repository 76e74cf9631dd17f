//! The `QSEG` volume container.
//!
//! Little-endian layout:
//!
//! ```text
//! header   (32 bytes)  magic "QSEG" | version u16 | flags u16 | volume_count u32
//!                      | reserved u32 | directory_offset u64 | directory_len u64
//! chunks               DEFLATE streams, one per image slice and one per label slice
//! directory            one entry per volume:
//!                        modality: u16 length + UTF-8
//!                        kind u8 (0 = 2D image, 1 = 3D volume) | channels u8
//!                        depth u32 | height u32 | width u32
//!                        image offsets: (depth+1) × u64, strictly increasing
//!                        label offsets: (depth+1) × u64, strictly increasing
//!                        object count u16, then per object:
//!                          id u8 | x1 f32 | y1 f32 | z1 u32 | x2 f32 | y2 f32 | z2 u32
//! ```
//!
//! Slice `z` of a volume occupies bytes `offsets[z]..offsets[z+1]`. Image
//! slices are `height × width × channels` interleaved u8; label slices are
//! `height × width` u8 object ids (0 = background).

use std::fs::File;
use std::io::{Read, Write};
use std::os::unix::fs::FileExt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::boxes::Box3D;
use crate::error::{Error, Module, Result};

pub const MAGIC: &[u8; 4] = b"QSEG";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    #[serde(rename = "2d")]
    Image2D,
    #[serde(rename = "3d")]
    Volume3D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeEntry {
    pub modality: String,
    pub kind: VolumeKind,
    pub channels: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub image_offsets: Vec<u64>,
    pub label_offsets: Vec<u64>,
    pub objects: Vec<(u8, Box3D)>,
}

/// Uncompressed volume handed to the writer.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeData {
    pub modality: String,
    pub kind: VolumeKind,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub slices: Vec<Vec<u8>>,
    pub labels: Vec<Vec<u8>>,
    pub objects: Vec<(u8, Box3D)>,
}

/// One decoded slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

fn deflate(data: &[u8]) -> Result<Vec<u8>> {
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::new(6));
    enc.write_all(data)?;
    Ok(enc.finish()?)
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::format(Module::Dataset, msg)
}

/// Serialise volumes into container bytes. Pure function of the input.
pub fn encode(volumes: &[VolumeData]) -> Result<Vec<u8>> {
    let mut out = vec![0u8; HEADER_LEN];
    let mut dir = Vec::new();
    for v in volumes {
        let plane = v.height * v.width;
        if v.slices.is_empty() || v.slices.len() != v.labels.len() {
            return Err(Error::contract(Module::Dataset, format!("volume of `{}` has mismatched slices/labels", v.modality)));
        }
        if v.kind == VolumeKind::Image2D && v.slices.len() != 1 {
            return Err(Error::contract(Module::Dataset, "a 2D image has exactly one slice"));
        }
        let chunk_table = |items: &[Vec<u8>], len: usize, out: &mut Vec<u8>| -> Result<Vec<u64>> {
            let mut offs = vec![out.len() as u64];
            for s in items {
                if s.len() != len {
                    return Err(Error::contract(Module::Dataset, format!("slice has {} bytes, expected {len}", s.len())));
                }
                out.extend_from_slice(&deflate(s)?);
                offs.push(out.len() as u64);
            }
            Ok(offs)
        };
        let img = chunk_table(&v.slices, plane * v.channels, &mut out)?;
        let lab = chunk_table(&v.labels, plane, &mut out)?;

        let name = v.modality.as_bytes();
        dir.extend_from_slice(&(name.len() as u16).to_le_bytes());
        dir.extend_from_slice(name);
        dir.push(match v.kind {
            VolumeKind::Image2D => 0,
            VolumeKind::Volume3D => 1,
        });
        dir.push(v.channels as u8);
        for d in [v.slices.len(), v.height, v.width] {
            dir.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for o in img.iter().chain(&lab) {
            dir.extend_from_slice(&o.to_le_bytes());
        }
        dir.extend_from_slice(&(v.objects.len() as u16).to_le_bytes());
        for (id, b) in &v.objects {
            dir.push(*id);
            dir.extend_from_slice(&b.x1.to_le_bytes());
            dir.extend_from_slice(&b.y1.to_le_bytes());
            dir.extend_from_slice(&(b.z1 as u32).to_le_bytes());
            dir.extend_from_slice(&b.x2.to_le_bytes());
            dir.extend_from_slice(&b.y2.to_le_bytes());
            dir.extend_from_slice(&(b.z2 as u32).to_le_bytes());
        }
    }
    let dir_off = out.len() as u64;
    out.extend_from_slice(&dir);
    let mut h = Vec::with_capacity(HEADER_LEN);
    h.extend_from_slice(MAGIC);
    h.extend_from_slice(&VERSION.to_le_bytes());
    h.extend_from_slice(&0u16.to_le_bytes());
    h.extend_from_slice(&(volumes.len() as u32).to_le_bytes());
    h.extend_from_slice(&0u32.to_le_bytes());
    h.extend_from_slice(&dir_off.to_le_bytes());
    h.extend_from_slice(&(dir.len() as u64).to_le_bytes());
    out[..HEADER_LEN].copy_from_slice(&h);
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| fmt_err("truncated directory"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn parse_directory(dir: &[u8], count: usize, data_end: u64) -> Result<Vec<VolumeEntry>> {
    let mut c = Cursor { buf: dir, pos: 0 };
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let n = c.u16()? as usize;
        let modality = String::from_utf8(c.take(n)?.to_vec()).map_err(|_| fmt_err("modality name is not UTF-8"))?;
        let kind = match c.u8()? {
            0 => VolumeKind::Image2D,
            1 => VolumeKind::Volume3D,
            k => return Err(fmt_err(format!("unknown volume kind {k}"))),
        };
        let channels = c.u8()? as usize;
        if channels != 1 && channels != 3 {
            return Err(fmt_err(format!("unsupported channel count {channels}")));
        }
        let (depth, height, width) = (c.u32()? as usize, c.u32()? as usize, c.u32()? as usize);
        if depth == 0 || height == 0 || width == 0 {
            return Err(fmt_err("volume with an empty extent"));
        }
        let mut table = || -> Result<Vec<u64>> {
            let offs = (0..=depth).map(|_| c.u64()).collect::<Result<Vec<_>>>()?;
            if offs.windows(2).any(|w| w[0] >= w[1]) || offs[depth] > data_end || offs[0] < HEADER_LEN as u64 {
                return Err(fmt_err("chunk offset table is not strictly increasing within the data region"));
            }
            Ok(offs)
        };
        let image_offsets = table()?;
        let label_offsets = table()?;
        let nobj = c.u16()? as usize;
        let mut objects = Vec::with_capacity(nobj);
        for _ in 0..nobj {
            let id = c.u8()?;
            let (x1, y1, z1) = (c.f32()?, c.f32()?, c.u32()? as usize);
            let (x2, y2, z2) = (c.f32()?, c.f32()?, c.u32()? as usize);
            objects.push((id, Box3D::new(x1, y1, z1, x2, y2, z2)));
        }
        out.push(VolumeEntry { modality, kind, channels, depth, height, width, image_offsets, label_offsets, objects });
    }
    if c.pos != dir.len() {
        return Err(fmt_err("trailing bytes after directory"));
    }
    Ok(out)
}

/// Read-only handle on a container file. Slices are fetched with
/// positioned reads, so concurrent readers need no locking.
pub struct VolumeStore {
    file: File,
    entries: Vec<VolumeEntry>,
    bytes_read: Vec<AtomicU64>,
}

impl VolumeStore {
    pub fn write(path: &Path, volumes: &[VolumeData]) -> Result<()> {
        let bytes = encode(volumes)?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn open(path: &Path) -> Result<VolumeStore> {
        let mut file = File::open(path)?;
        let mut h = [0u8; HEADER_LEN];
        file.read_exact(&mut h).map_err(|_| fmt_err("file shorter than the header"))?;
        if &h[..4] != MAGIC {
            return Err(fmt_err("bad magic, not a QSEG container"));
        }
        let version = u16::from_le_bytes([h[4], h[5]]);
        if version != VERSION {
            return Err(fmt_err(format!("unsupported container version {version}")));
        }
        let count = u32::from_le_bytes(h[8..12].try_into().unwrap()) as usize;
        let dir_off = u64::from_le_bytes(h[16..24].try_into().unwrap());
        let dir_len = u64::from_le_bytes(h[24..32].try_into().unwrap());
        let file_len = file.metadata()?.len();
        if dir_off.checked_add(dir_len) != Some(file_len) {
            return Err(fmt_err("directory does not end at end of file"));
        }
        let mut dir = vec![0u8; dir_len as usize];
        file.read_exact_at(&mut dir, dir_off)?;
        let entries = parse_directory(&dir, count, dir_off)?;
        let bytes_read = entries.iter().map(|_| AtomicU64::new(0)).collect();
        Ok(VolumeStore { file, entries, bytes_read })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[VolumeEntry] {
        &self.entries
    }

    pub fn entry(&self, v: usize) -> Result<&VolumeEntry> {
        self.entries.get(v).ok_or(Error::Index { index: v, len: self.entries.len() })
    }

    fn read_chunk(&self, v: usize, offs: &[u64], z: usize, expect: usize) -> Result<Vec<u8>> {
        if z + 1 >= offs.len() {
            return Err(Error::Index { index: z, len: offs.len() - 1 });
        }
        let (a, b) = (offs[z], offs[z + 1]);
        let mut raw = vec![0u8; (b - a) as usize];
        self.file.read_exact_at(&mut raw, a)?;
        self.bytes_read[v].fetch_add(raw.len() as u64, Ordering::Relaxed);
        let mut out = Vec::with_capacity(expect);
        DeflateDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| fmt_err(format!("volume {v} slice {z}: {e}")))?;
        if out.len() != expect {
            return Err(fmt_err(format!("volume {v} slice {z}: {} bytes after inflate, expected {expect}", out.len())));
        }
        Ok(out)
    }

    pub fn read_slice(&self, v: usize, z: usize) -> Result<Slice> {
        let e = self.entry(v)?;
        let data = self.read_chunk(v, &e.image_offsets, z, e.height * e.width * e.channels)?;
        Ok(Slice { height: e.height, width: e.width, channels: e.channels, data })
    }

    pub fn read_label(&self, v: usize, z: usize) -> Result<Vec<u8>> {
        let e = self.entry(v)?;
        self.read_chunk(v, &e.label_offsets, z, e.height * e.width)
    }

    /// Compressed bytes read so far from each volume's chunks.
    pub fn bytes_read(&self) -> Vec<u64> {
        self.bytes_read.iter().map(|b| b.load(Ordering::Relaxed)).collect()
    }

    /// Human-readable summary written next to the container.
    pub fn sidecar(&self) -> Sidecar {
        let mut mods: Vec<SidecarModality> = Vec::new();
        for e in &self.entries {
            let m = match mods.iter_mut().find(|m| m.name == e.modality) {
                Some(m) => m,
                None => {
                    mods.push(SidecarModality { name: e.modality.clone(), kind: e.kind, volumes: 0, slices: 0 });
                    mods.last_mut().unwrap()
                }
            };
            m.volumes += 1;
            m.slices += e.depth;
        }
        Sidecar { version: VERSION, volumes: self.entries.len(), modalities: mods }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarModality {
    pub name: String,
    pub kind: VolumeKind,
    pub volumes: usize,
    pub slices: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub version: u16,
    pub volumes: usize,
    pub modalities: Vec<SidecarModality>,
}
