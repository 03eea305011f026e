//! Binary weight snapshots.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "T2MD"
//! version u32      currently 1
//! meta    u32 count, then per entry: key_len u32, key, val_len u32, val
//! table   u32 count, then per tensor: name_len u32, name, rank u32,
//!         rank x u64 dims, u64 element offset into the payload
//! payload u64 element count, then that many f32 values
//! ```
//!
//! Metadata entries and tensors are stored sorted by key/name, and offsets
//! are assigned in that order, so two snapshots of identical state are
//! byte-identical. Weights are stored as f32 regardless of the in-memory
//! element type.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::params::ParamSet;
use crate::tensor::Element;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: [u8; 4] = *b"T2MD";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a weight snapshot (bad magic)")]
    BadMagic,
    #[error("snapshot format version {0} is not supported (expected {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("snapshot is truncated or corrupt: {0}")]
    Truncated(String),
    #[error("snapshot does not match this model: {0}")]
    NameMismatch(String),
    #[error("tensor {name} has shape {found:?} in the snapshot but {expected:?} in the model")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("bad snapshot metadata: {0}")]
    Meta(String),
}

/// A parsed snapshot, independent of any model type.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCheckpoint {
    pub metadata: BTreeMap<String, String>,
    /// `(name, shape, values)` sorted by name.
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl RawCheckpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let total: usize = self.tensors.iter().map(|(_, _, v)| v.len()).sum();
        let mut out = Vec::with_capacity(64 + total * 4);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());

        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            write_str(&mut out, k);
            write_str(&mut out, v);
        }

        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, shape, values) in &self.tensors {
            write_str(&mut out, name);
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += values.len() as u64;
        }

        out.extend_from_slice(&(total as u64).to_le_bytes());
        for (_, _, values) in &self.tensors {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }

        let meta_count = r.u32()? as usize;
        let mut metadata = BTreeMap::new();
        for _ in 0..meta_count {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }

        let tensor_count = r.u32()? as usize;
        let mut table = Vec::with_capacity(tensor_count);
        for _ in 0..tensor_count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let offset = r.u64()? as usize;
            table.push((name, shape, offset));
        }

        let total = r.u64()? as usize;
        let payload_bytes = r.take(total.checked_mul(4).ok_or_else(|| {
            CheckpointError::Truncated("payload length overflows".into())
        })?)?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Truncated(format!(
                "{} trailing bytes after payload",
                bytes.len() - r.pos
            )));
        }

        let mut tensors = Vec::with_capacity(tensor_count);
        for (name, shape, offset) in table {
            let numel: usize = shape.iter().product();
            let end = offset.checked_add(numel).filter(|&e| e <= total).ok_or_else(|| {
                CheckpointError::Truncated(format!("tensor {name} extends past the payload"))
            })?;
            let mut values = Vec::with_capacity(numel);
            for i in offset..end {
                let b: [u8; 4] = payload_bytes[i * 4..i * 4 + 4].try_into().unwrap();
                values.push(f32::from_le_bytes(b));
            }
            tensors.push((name, shape, values));
        }
        Ok(RawCheckpoint { metadata, tensors })
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated(format!(
                "needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| CheckpointError::Truncated("string is not valid utf-8".into()))
    }
}

/// The serialized form of a parameter set: every tensor as f32, sorted by
/// name, under the given metadata.
pub fn snapshot<E: Element, M: ParamSet<E>>(
    model: &M,
    metadata: &BTreeMap<String, String>,
) -> RawCheckpoint {
    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = model
        .params()
        .into_iter()
        .map(|(name, t)| {
            let values = t.data().iter().map(|&v| v.to_f64() as f32).collect();
            (name, t.shape().to_vec(), values)
        })
        .collect();
    tensors.sort_by(|a, b| a.0.cmp(&b.0));
    RawCheckpoint { metadata: metadata.clone(), tensors }
}

/// Snapshots a parameter set with the given metadata.
pub fn save_checkpoint<E: Element, M: ParamSet<E>>(
    path: &Path,
    model: &M,
    metadata: &BTreeMap<String, String>,
) -> Result<(), CheckpointError> {
    fs::write(path, snapshot(model, metadata).to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<RawCheckpoint, CheckpointError> {
    RawCheckpoint::from_bytes(&fs::read(path)?)
}

/// Copies snapshot weights into a model whose parameter names must match
/// the snapshot exactly (no extras on either side).
pub fn load_into<E: Element, M: ParamSet<E>>(
    raw: &RawCheckpoint,
    model: &mut M,
) -> Result<(), CheckpointError> {
    let mut params = model.params_mut();
    params.sort_by(|a, b| a.0.cmp(&b.0));

    let model_names: Vec<&str> = params.iter().map(|(n, _)| n.as_str()).collect();
    let ckpt_names: Vec<&str> = raw.tensors.iter().map(|(n, _, _)| n.as_str()).collect();
    if model_names != ckpt_names {
        let missing: Vec<&&str> =
            model_names.iter().filter(|n| !ckpt_names.contains(n)).take(3).collect();
        let extra: Vec<&&str> =
            ckpt_names.iter().filter(|n| !model_names.contains(n)).take(3).collect();
        return Err(CheckpointError::NameMismatch(format!(
            "model-only names {missing:?}, snapshot-only names {extra:?}"
        )));
    }

    for ((_, tensor), (name, shape, values)) in params.iter_mut().zip(&raw.tensors) {
        if tensor.shape() != shape.as_slice() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                expected: tensor.shape().to_vec(),
                found: shape.clone(),
            });
        }
        let dst = tensor.data_mut();
        for (d, &s) in dst.iter_mut().zip(values) {
            *d = E::from_f64(s as f64);
        }
    }
    Ok(())
}
