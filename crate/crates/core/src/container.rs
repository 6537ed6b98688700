//! Single-file tensor container used for checkpoints, feature tables, and
//! sampled batches.
//!
//! Layout: a UTF-8 JSON header mapping tensor names to
//! `{"dtype": "f32", "shape": [...], "byte_offset": N}`, a `"\n\0"` separator,
//! then the little-endian raw payloads. Offsets are relative to the first
//! byte after the separator. Round-trips are bitwise exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SEPARATOR: &[u8] = b"\n\0";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    byte_offset: u64,
}

/// An in-memory set of named f32 tensors, written to or read from the
/// container format. Names are stored sorted so the on-disk layout is
/// deterministic.
#[derive(Debug, Clone, Default)]
pub struct TensorMap {
    tensors: BTreeMap<String, ArrayD<f32>>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArrayD<f32>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.tensors.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<ArrayD<f32>> {
        self.tensors.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f32>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(e, path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(e, path))?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = BTreeMap::new();
        let mut offset = 0u64;
        for (name, tensor) in &self.tensors {
            header.insert(
                name.clone(),
                Entry {
                    dtype: "f32".to_string(),
                    shape: tensor.shape().to_vec(),
                    byte_offset: offset,
                },
            );
            offset += 4 * tensor.len() as u64;
        }
        let mut out = Vec::with_capacity(offset as usize + 256);
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(SEPARATOR).expect("vec write");
        for tensor in self.tensors.values() {
            // standard layout guaranteed at insertion boundaries; fall back
            // to a copy for views with exotic strides
            match tensor.as_slice() {
                Some(s) => {
                    for &v in s {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                None => {
                    for v in tensor.iter() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let sep = bytes
            .windows(SEPARATOR.len())
            .position(|w| w == SEPARATOR)
            .ok_or_else(|| Error::data("container: missing header separator"))?;
        let header: BTreeMap<String, Entry> = serde_json::from_slice(&bytes[..sep])?;
        let payload = &bytes[sep + SEPARATOR.len()..];
        let mut tensors = BTreeMap::new();
        for (name, entry) in header {
            if entry.dtype != "f32" {
                return Err(Error::data(format!(
                    "container: tensor '{name}' has unsupported dtype '{}'",
                    entry.dtype
                )));
            }
            let count: usize = entry.shape.iter().product();
            let start = entry.byte_offset as usize;
            let end = start + 4 * count;
            if end > payload.len() {
                return Err(Error::data(format!(
                    "container: tensor '{name}' payload [{start}, {end}) exceeds {} bytes",
                    payload.len()
                )));
            }
            let mut data = Vec::with_capacity(count);
            for chunk in payload[start..end].chunks_exact(4) {
                data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
                .map_err(|e| Error::data(format!("container: tensor '{name}': {e}")))?;
            tensors.insert(name, arr);
        }
        Ok(TensorMap { tensors })
    }
}
