//! Binary weights file.
//!
//! Little-endian layout:
//!
//! ```text
//! magic       8 bytes  "GZCMW001"
//! count       u32
//! per entry:
//!   name_len  u32
//!   name      name_len bytes, UTF-8
//!   rank      u32
//!   dims      rank × u32
//!   data      prod(dims) × f32
//! ```
//!
//! Entries hold parameters and batch-norm running statistics, sorted by name.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::network::{Model, ModelError, Provenance};
use super::spec::ArchitectureConfig;
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 8] = b"GZCMW001";

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("bad magic: not a GZCMW001 weights file")]
    Magic,
    #[error("format error in entry {index} (`{name}`): {detail}")]
    Entry { index: usize, name: String, detail: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("weights do not match architecture: {0}")]
    Mismatch(#[from] ModelError),
}

pub fn encode(tensors: impl IntoIterator<Item = (impl AsRef<str>, impl AsRef<Tensor>)>) -> Vec<u8> {
    let entries: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in &entries {
        let (name, t) = (name.as_ref(), t.as_ref());
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

/// Decodes every entry in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, WeightsError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8) != Some(WEIGHTS_MAGIC.as_slice()) {
        return Err(WeightsError::Magic);
    }
    let count = r.u32().ok_or_else(|| WeightsError::Format("truncated header".into()))? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for index in 0..count {
        let truncated = |name: &str| WeightsError::Entry { index, name: name.to_string(), detail: "truncated".into() };
        let len = r.u32().ok_or_else(|| truncated("?"))? as usize;
        let name_bytes = r.take(len).ok_or_else(|| truncated("?"))?;
        let name = String::from_utf8(name_bytes.to_vec())
            .map_err(|_| WeightsError::Entry { index, name: "?".into(), detail: "name is not UTF-8".into() })?;
        let rank = r.u32().ok_or_else(|| truncated(&name))? as usize;
        if rank == 0 || rank > 8 {
            return Err(WeightsError::Entry { index, name, detail: format!("implausible rank {rank}") });
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32().ok_or_else(|| truncated(&name))? as usize);
        }
        let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let raw = n.and_then(|n| n.checked_mul(4)).and_then(|b| r.take(b)).ok_or_else(|| truncated(&name))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(dims, data).map_err(|e| WeightsError::Entry { index, name: name.clone(), detail: e.to_string() })?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(WeightsError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn save_weights(model: &Model, path: &Path) -> Result<(), WeightsError> {
    let bytes = encode(model.tensors());
    fs::write(path, bytes).map_err(|source| WeightsError::Io { path: path.display().to_string(), source })
}

/// Loads a weights file for `config`, validating every entry's name and shape.
pub fn load_weights(config: ArchitectureConfig, path: &Path) -> Result<Model, WeightsError> {
    let bytes = fs::read(path).map_err(|source| WeightsError::Io { path: path.display().to_string(), source })?;
    let entries = decode(&bytes)?;
    let mut map = BTreeMap::new();
    for (name, t) in entries {
        if map.insert(name.clone(), t).is_some() {
            return Err(WeightsError::Format(format!("duplicate entry `{name}`")));
        }
    }
    Ok(Model::from_tensors(config, map, Provenance::Loaded { path: path.display().to_string() })?)
}

impl AsRef<Tensor> for Tensor {
    fn as_ref(&self) -> &Tensor {
        self
    }
}
