//! The `TDM1` tensor container.
//!
//! Layout: magic `TDM1`, `u32` LE format version, `u64` LE manifest length,
//! JSON manifest, little-endian `f32` payload, `u32` LE CRC-32 of the payload.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TDM1";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tensors: BTreeMap<String, TensorEntry>,
    /// Free-form description of what the tensors are (architecture, adapter rank).
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Named tensors plus metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub tensors: BTreeMap<String, Tensor<S>>,
    pub meta: serde_json::Value,
}

pub fn encode<S: Scalar>(tensors: &BTreeMap<String, Tensor<S>>, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let mut entries = BTreeMap::new();
    let mut payload = Vec::new();
    for (name, t) in tensors {
        if !t.is_finite() {
            return Err(Error::NonFinite(format!("checkpoint tensor {name}")));
        }
        let offset = payload.len() as u64;
        for v in t.data() {
            payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        entries.insert(
            name.clone(),
            TensorEntry {
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset,
                length: payload.len() as u64 - offset,
            },
        );
    }
    let manifest = serde_json::to_vec(&Manifest {
        tensors: entries,
        meta: meta.clone(),
    })
    .map_err(|e| Error::Manifest(e.to_string()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + payload.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<Checkpoint<S>> {
    if bytes.len() < 4 {
        return Err(Error::Truncated(format!("{} bytes, header needs {HEADER_LEN}", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated(format!("{} bytes, header needs {HEADER_LEN}", bytes.len())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version == 0 || version > FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let rest = bytes.len() - HEADER_LEN;
    if mlen > rest as u64 || rest - (mlen as usize) < 4 {
        return Err(Error::Truncated(format!("manifest of {mlen} bytes with {rest} bytes after the header")));
    }
    let mlen = mlen as usize;
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..HEADER_LEN + mlen])
        .map_err(|e| Error::Manifest(e.to_string()))?;
    let payload = &bytes[HEADER_LEN + mlen..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(manifest.tensors.len());
    let mut tensors = BTreeMap::new();
    for (name, e) in &manifest.tensors {
        if e.dtype != "f32" {
            return Err(Error::Manifest(format!("{name}: dtype {} (only f32 is stored)", e.dtype)));
        }
        let numel: usize = e.shape.iter().product();
        let end = e.offset.checked_add(e.length);
        if e.length != numel as u64 * 4 || end.is_none_or(|end| end > payload.len() as u64) {
            return Err(Error::Manifest(format!("{name}: span {}+{} out of bounds", e.offset, e.length)));
        }
        spans.push((e.offset, e.offset + e.length, name));
        let raw = &payload[e.offset as usize..(e.offset + e.length) as usize];
        let data = raw
            .chunks_exact(4)
            .map(|c| S::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        tensors.insert(name.clone(), Tensor::new(&e.shape, data)?);
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::Manifest(format!("{} overlaps {}", w[0].2, w[1].2)));
        }
    }
    Ok(Checkpoint {
        tensors,
        meta: manifest.meta,
    })
}

pub fn save<S: Scalar>(
    path: impl AsRef<Path>,
    tensors: &BTreeMap<String, Tensor<S>>,
    meta: &serde_json::Value,
) -> Result<()> {
    let bytes = encode(tensors, meta)?;
    std::fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path, e))
}

pub fn load<S: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<S>> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    decode(&bytes)
}
