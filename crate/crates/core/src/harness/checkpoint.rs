//! Binary checkpoint container.
//!
//! ```text
//! "CFUS"  u32 version  u64 len  <config JSON>  u64 blocks
//! per block: u32 len <name>  u32 ndim  u64 dims[ndim]  f64 data[prod(dims)]
//! ```
//!
//! Every integer and float is little-endian.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::error::{Error, Result};
use crate::model::{FusionModel, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CFUS";
pub const FORMAT_VERSION: u32 = 1;

/// The configuration echo stored in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: String,
    pub model: ModelConfig,
    pub run: RunConfig,
}

pub fn encode_checkpoint(model: &FusionModel, run: &RunConfig) -> Result<Vec<u8>> {
    let header = CheckpointHeader { version: super::version_string(), model: model.config.clone(), run: run.clone() };
    let json = serde_json::to_vec(&header)?;
    let state = model.state()?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(state.len() as u64).to_le_bytes());
    for (name, t) in &state {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows".into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, FusionModel)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let n = c.len()?;
    let header: CheckpointHeader = serde_json::from_slice(c.take(n)?)?;
    let blocks = c.len()?;
    let mut state = Vec::with_capacity(blocks.min(4096));
    for _ in 0..blocks {
        let n = c.u32()? as usize;
        let name = String::from_utf8(c.take(n)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.len()).collect::<Result<Vec<_>>>()?;
        let count = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d));
        let count = count.ok_or_else(|| Error::Format(format!("tensor {name}: shape overflows")))?;
        let raw = c.take(count.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        state.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    let model = FusionModel::from_state(header.model.clone(), &state)?;
    Ok((header, model))
}

pub fn write_checkpoint(path: &Path, model: &FusionModel, run: &RunConfig) -> Result<()> {
    let bytes = encode_checkpoint(model, run)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, FusionModel)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
