//! The QSMF model file.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic        "QSMF"
//! version      u16 (= 1)
//! mode         u8  (0 float, 1 quantized)
//! reserved     u8
//! config_len   u32
//! config       canonical JSON (sorted keys, no whitespace)
//! count        u32
//! entries      count × {
//!                name_len u16, name UTF-8,
//!                kind u8 (0 float32, 1 int8 + scale),
//!                ndim u8, dims u32 × ndim,
//!                scale f32          (kind 1 only),
//!                offset u64, nbytes u64   (into payload)
//!              }
//! payload_len  u64
//! payload      tensor buffers, in entry order
//! crc32        u32 over every preceding byte
//! ```
//!
//! Parameters keep their model names. Quantizer scales that are not folded
//! into an int8 weight entry are stored as float32 `[1]` tensors named
//! `quant:<node>`. In quantized mode every quantized weight is an int8
//! entry whose scale is the weight quantizer's scale, so `q·scale` is both
//! the imported weight and exactly what the integer path consumes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::boxes::Box2D;
use crate::error::{Error, Module, Result};
use crate::model::{is_buffer, is_quantized_weight, weight_quantizer_name, Ctx, Group, Model, ModelConfig, Trainable};
use crate::quant::QuantizerState;
use crate::tensor::{Tape, Tensor};

pub const MAGIC: &[u8; 4] = b"QSMF";
pub const VERSION: u16 = 1;
const QUANT_PREFIX: &str = "quant:";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportMode {
    Float,
    Quantized,
}

impl std::str::FromStr for ExportMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "float" => Ok(ExportMode::Float),
            "quantized" | "int8" => Ok(ExportMode::Quantized),
            _ => Err(Error::config(Module::Store, format!("unknown export mode `{s}` (float|quantized)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EntryKind {
    Float32,
    Int8 { scale: f32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub kind: EntryKind,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

impl Entry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Parsed file: header fields, tensor table and payload.
#[derive(Debug, Clone)]
pub struct ModelFile {
    pub mode: ExportMode,
    pub config: ModelConfig,
    pub entries: Vec<Entry>,
    payload: Vec<u8>,
}

fn canonical_json(config: &ModelConfig) -> Result<Vec<u8>> {
    // serde_json's default map is ordered by key
    let v = serde_json::to_value(config)?;
    Ok(serde_json::to_vec(&v)?)
}

/// True when some quantized node still has no calibrated scale.
fn has_uncalibrated(model: &Model) -> Result<bool> {
    if !model.uncalibrated_nodes().is_empty() {
        return Ok(true);
    }
    let s = model.config().image_size;
    let mut ctx = Ctx::new(model, Tape::new(), Trainable::none()).observe();
    ctx.forward(&Tensor::zeros(&[3, s, s]), Box2D::new(0.0, 0.0, s as f32, s as f32))?;
    Ok(!ctx.observations().is_empty())
}

/// Serialise a model. Pure function of the model state.
pub fn encode(model: &Model, mode: ExportMode) -> Result<Vec<u8>> {
    let quantized_group =
        |name: &str| model.is_quantized(Group::of(name)) && is_quantized_weight(name);
    if mode == ExportMode::Quantized {
        if !model.is_quantized(Group::Encoder) && !model.is_quantized(Group::Decoder) {
            return Err(Error::contract(Module::Store, "quantized export of a model with no quantized submodule"));
        }
        if has_uncalibrated(model)? {
            return Err(Error::contract(Module::Store, "quantized export requires calibrated quantizers"));
        }
    }
    let mut table: Vec<(String, EntryKind, Vec<usize>, Vec<u8>)> = Vec::new();
    let mut folded = std::collections::BTreeSet::new();
    for (name, t) in model.params() {
        if mode == ExportMode::Quantized && quantized_group(name) {
            let qname = weight_quantizer_name(name);
            let st = model.quantizers().get(&qname).copied().ok_or_else(|| {
                Error::contract(Module::Store, format!("no weight quantizer for `{name}`"))
            })?;
            let q = st.quantize_int(t)?;
            folded.insert(qname);
            let bytes = q.q.iter().map(|&v| v as u8).collect();
            table.push((name.clone(), EntryKind::Int8 { scale: q.scale }, t.shape().to_vec(), bytes));
        } else {
            let bytes = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            table.push((name.clone(), EntryKind::Float32, t.shape().to_vec(), bytes));
        }
    }
    for (node, st) in model.quantizers() {
        if st.calibrated && !folded.contains(node) {
            table.push((format!("{QUANT_PREFIX}{node}"), EntryKind::Float32, vec![1], st.scale.to_le_bytes().to_vec()));
        }
    }

    let config = canonical_json(model.config())?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match mode {
        ExportMode::Float => 0,
        ExportMode::Quantized => 1,
    });
    out.push(0);
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(table.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, kind, shape, bytes) in &table {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(matches!(kind, EntryKind::Int8 { .. }) as u8);
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        if let EntryKind::Int8 { scale } = kind {
            out.extend_from_slice(&scale.to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        offset += bytes.len() as u64;
    }
    out.extend_from_slice(&offset.to_le_bytes());
    for (.., bytes) in &table {
        out.extend_from_slice(bytes);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn export(model: &Model, path: &Path, mode: ExportMode) -> Result<()> {
    let bytes = encode(model, mode)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::format(Module::Store, format!("truncated file at byte {}", self.pos))
        })?;
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

impl ModelFile {
    pub fn parse(bytes: &[u8]) -> Result<ModelFile> {
        let bad = |m: String| Error::format(Module::Store, m);
        if bytes.len() < 4 + 2 + 4 || &bytes[..4] != MAGIC {
            return Err(bad("not a QSMF file (bad magic)".into()));
        }
        let mut r = Reader { buf: &bytes[..bytes.len() - 4], pos: 4 };
        let version = r.u16()?;
        if version != VERSION {
            return Err(bad(format!("unsupported QSMF version {version} (expected {VERSION})")));
        }
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        if crc32fast::hash(&bytes[..bytes.len() - 4]) != stored {
            return Err(bad("CRC mismatch; file is corrupt".into()));
        }
        let mode = match r.u8()? {
            0 => ExportMode::Float,
            1 => ExportMode::Quantized,
            m => return Err(bad(format!("unknown mode byte {m}"))),
        };
        r.u8()?;
        let clen = r.u32()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(clen)?)
            .map_err(|e| bad(format!("config block: {e}")))?;
        config.validate().map_err(|e| bad(format!("config block: {e}")))?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?).map_err(|_| bad("tensor name is not UTF-8".into()))?.to_string();
            let kind_byte = r.u8()?;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let kind = match kind_byte {
                0 => EntryKind::Float32,
                1 => EntryKind::Int8 { scale: r.f32()? },
                k => return Err(bad(format!("`{name}`: unknown kind {k}"))),
            };
            let offset = r.u64()?;
            let nbytes = r.u64()?;
            let numel: usize = shape.iter().product();
            let width = if kind == EntryKind::Float32 { 4 } else { 1 };
            if nbytes != (numel * width) as u64 {
                return Err(bad(format!("`{name}`: {nbytes} bytes for shape {shape:?}")));
            }
            entries.push(Entry { name, kind, shape, offset, nbytes });
        }
        let plen = r.u64()? as usize;
        let payload = r.take(plen)?.to_vec();
        if r.pos != r.buf.len() {
            return Err(bad("trailing bytes after payload".into()));
        }
        for e in &entries {
            if e.offset.checked_add(e.nbytes).map_or(true, |end| end > plen as u64) {
                return Err(bad(format!("`{}` extends past the payload", e.name)));
            }
        }
        Ok(ModelFile { mode, config, entries, payload })
    }

    pub fn read(path: &Path) -> Result<ModelFile> {
        ModelFile::parse(&std::fs::read(path)?)
    }

    fn bytes(&self, e: &Entry) -> &[u8] {
        &self.payload[e.offset as usize..(e.offset + e.nbytes) as usize]
    }

    pub fn int8_values(&self, e: &Entry) -> Vec<i8> {
        self.bytes(e).iter().map(|&b| b as i8).collect()
    }

    /// Dequantized values of an entry.
    pub fn values(&self, e: &Entry) -> Vec<f32> {
        match e.kind {
            EntryKind::Float32 => {
                self.bytes(e).chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
            }
            EntryKind::Int8 { scale } => self.bytes(e).iter().map(|&b| b as i8 as f32 * scale).collect(),
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        let mut params = BTreeMap::new();
        let mut quantizers = BTreeMap::new();
        for e in &self.entries {
            let vals = self.values(e);
            if let Some(node) = e.name.strip_prefix(QUANT_PREFIX) {
                if e.shape != [1] {
                    return Err(Error::format(Module::Store, format!("`{}` must have shape [1]", e.name)));
                }
                quantizers.insert(node.to_string(), QuantizerState::with_scale(vals[0]));
                continue;
            }
            if let EntryKind::Int8 { scale } = e.kind {
                quantizers.insert(weight_quantizer_name(&e.name), QuantizerState::with_scale(scale));
            }
            params.insert(e.name.clone(), Tensor::new(e.shape.clone(), vals)?);
        }
        Model::from_parts(self.config.clone(), params, quantizers)
    }

    /// Learned parameters per submodule, excluding buffers and quantizer scales.
    pub fn param_counts(&self) -> BTreeMap<Group, usize> {
        let mut out: BTreeMap<Group, usize> = Group::ALL.iter().map(|&g| (g, 0)).collect();
        for e in &self.entries {
            if !e.name.starts_with(QUANT_PREFIX) && !is_buffer(&e.name) {
                *out.get_mut(&Group::of(&e.name)).unwrap() += e.numel();
            }
        }
        out
    }

    /// Human-readable listing of the file.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let mode = match self.mode {
            ExportMode::Float => "float",
            ExportMode::Quantized => "quantized",
        };
        let _ = writeln!(s, "QSMF v{VERSION}, mode {mode}, {} tensors", self.entries.len());
        let _ = writeln!(s, "config {}", String::from_utf8_lossy(&canonical_json(&self.config).unwrap_or_default()));
        let _ = writeln!(s, "{:<32} {:<8} {:<18} scale", "name", "kind", "shape");
        for e in &self.entries {
            let (kind, scale) = match e.kind {
                EntryKind::Int8 { scale } => ("int8", Some(scale)),
                EntryKind::Float32 if e.name.starts_with(QUANT_PREFIX) => ("float32", Some(self.values(e)[0])),
                EntryKind::Float32 => ("float32", None),
            };
            let scale = scale.map(|v| format!("{v:e}")).unwrap_or_default();
            let _ = writeln!(s, "{:<32} {:<8} {:<18} {scale}", e.name, kind, format!("{:?}", e.shape));
        }
        let counts = self.param_counts();
        let _ = writeln!(s, "parameters by submodule:");
        for (g, n) in &counts {
            let _ = writeln!(s, "  {:<16} {n}", g.label());
        }
        let _ = writeln!(s, "  {:<16} {}", "total", counts.values().sum::<usize>());
        s
    }
}

pub fn import(path: &Path) -> Result<Model> {
    ModelFile::read(path)?.to_model()
}

pub fn inspect(path: &Path) -> Result<String> {
    Ok(ModelFile::read(path)?.summary())
}
