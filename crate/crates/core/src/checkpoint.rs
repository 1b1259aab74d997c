//! Checkpoint file: JSON metadata, named f32 tensors and the coder tables.
//!
//! Layout (little-endian):
//! - magic `LMFCCKPT`
//! - metadata: u32 length + UTF-8 JSON ([`CheckpointMeta`])
//! - tensors: u32 count, then per tensor u16 name length, name, u8 rank,
//!   u32 per dim, and the values as f32
//! - scale table: u32 count + f64 values
//! - Gaussian tables, then factorized tables, each in
//!   [`CdfTables::to_bytes`] form
//!
//! Tensor names are module-prefixed (`fenet.`, `entropy.`, `drnet.`), so a
//! checkpoint can be read by any implementation that follows the same key
//! schema.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::CodecConfig;
use crate::coder::CdfTables;
use crate::entropy::ModelTables;
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"LMFCCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format {0}")]
    UnsupportedFormat(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("bad metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("bad tensor name")]
    BadName,
    #[error("bad coder tables")]
    BadTables,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub codec: CodecConfig,
    /// Hidden widths of the entropy-parameter network.
    pub param_widths: [usize; 2],
    pub lambda: f64,
    pub scale_floor: f64,
    pub p_min: f64,
    /// Always `"mean_offset"`: coded symbols are `round(y − μ)`.
    pub rounding: String,
    pub steps: u64,
    /// Effective configuration of the run that produced the checkpoint.
    #[serde(default)]
    pub run_config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub tables: ModelTables,
}

pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let meta = serde_json::to_vec(&ckpt.meta).expect("metadata serializes");
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (name, t) in ckpt.params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.extend_from_slice(&(ckpt.tables.scales.len() as u32).to_le_bytes());
    for s in &ckpt.tables.scales {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.extend_from_slice(&ckpt.tables.gaussian.to_bytes());
    out.extend_from_slice(&ckpt.tables.factorized.to_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let s = self.bytes.get(self.pos..self.pos + n).ok_or(CheckpointError::Truncated)?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tables(&mut self) -> Result<CdfTables, CheckpointError> {
        let (t, used) = CdfTables::from_bytes(&self.bytes[self.pos..]).ok_or(CheckpointError::BadTables)?;
        self.pos += used;
        Ok(t)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(len)?)?;
    if meta.format != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedFormat(meta.format));
    }
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| CheckpointError::BadName)?.to_string();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        params.insert(name, Tensor::new(&shape, data));
    }
    let scale_count = r.u32()? as usize;
    let mut scales = Vec::with_capacity(scale_count);
    for _ in 0..scale_count {
        scales.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
    }
    let gaussian = r.tables()?;
    let factorized = r.tables()?;
    if gaussian.len() != scales.len() {
        return Err(CheckpointError::BadTables);
    }
    Ok(Checkpoint {
        meta,
        params,
        tables: ModelTables {
            scales,
            gaussian,
            factorized,
        },
    })
}

pub fn save(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    std::fs::write(path, to_bytes(ckpt))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    from_bytes(&std::fs::read(path)?)
}
