//! Named-tensor container shared by datasets and model checkpoints.
//!
//! Layout: an 8-byte little-endian header length, a UTF-8 JSON header
//! mapping each tensor name to `{dtype, shape, offset, length}`, then the raw
//! little-endian payload. `offset` and `length` are byte positions relative to
//! the start of the payload. An optional `__metadata__` entry holds string
//! pairs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorContainer {
    pub tensors: BTreeMap<String, Tensor<f32>>,
    pub metadata: BTreeMap<String, String>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = serde_json::Map::new();
        if !self.metadata.is_empty() {
            header.insert(
                METADATA_KEY.to_string(),
                serde_json::to_value(&self.metadata).expect("string map serializes"),
            );
        }
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let length = (t.numel() * 4) as u64;
            let entry = Entry {
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset,
                length,
            };
            header.insert(name.clone(), serde_json::to_value(entry).expect("entry serializes"));
            offset += length;
        }
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(format!("invalid container header: {msg}"));
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| bad("file shorter than the 8-byte length prefix".into()))?;
        let header_len = u64::from_le_bytes(len_bytes);
        let header_end = 8u64
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or_else(|| bad(format!("header length {header_len} exceeds file size {}", bytes.len())))?
            as usize;
        let header: serde_json::Map<String, serde_json::Value> =
            serde_json::from_slice(&bytes[8..header_end]).map_err(|e| bad(e.to_string()))?;
        let payload = &bytes[header_end..];

        let mut out = Self::new();
        for (name, value) in header {
            if name == METADATA_KEY {
                out.metadata = serde_json::from_value(value).map_err(|e| bad(format!("metadata: {e}")))?;
                continue;
            }
            let entry: Entry = serde_json::from_value(value).map_err(|e| bad(format!("{name}: {e}")))?;
            if entry.dtype != "f32" {
                return Err(bad(format!("{name}: unsupported dtype {}", entry.dtype)));
            }
            let numel: usize = entry.shape.iter().product();
            if entry.length != (numel * 4) as u64 {
                return Err(bad(format!(
                    "{name}: length {} does not match shape {:?}",
                    entry.length, entry.shape
                )));
            }
            let end = entry
                .offset
                .checked_add(entry.length)
                .filter(|&e| e <= payload.len() as u64)
                .ok_or_else(|| bad(format!("{name}: payload range exceeds file (truncated?)")))?;
            let raw = &payload[entry.offset as usize..end as usize];
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor = Tensor::from_vec(&entry.shape, data).map_err(|e| bad(format!("{name}: {e}")))?;
            out.tensors.insert(name, tensor);
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
