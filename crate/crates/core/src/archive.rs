//! Weight archive: a little-endian `u64` header length, a UTF-8 JSON header,
//! then a payload of little-endian `f32` values in row-major order.
//!
//! ```text
//! [u64 header_len][header_len bytes of JSON][payload]
//! ```
//!
//! The header names the architecture, lists every tensor with its shape and
//! byte offset into the payload, and carries the loss-network input means.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_NAME: &str = "dfc-dit-weights";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub architecture: String,
    #[serde(default)]
    pub means: Vec<f32>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// In-memory form of a weight archive.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightArchive {
    pub architecture: String,
    pub means: Vec<f32>,
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<NamedTensor>,
}

impl WeightArchive {
    pub fn new(architecture: impl Into<String>) -> Self {
        WeightArchive { architecture: architecture.into(), ..Default::default() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(NamedTensor { name: name.into(), shape, data });
    }

    pub fn get(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Archive { name: name.to_string(), reason: "tensor missing from archive".into() })
    }

    /// Looks up `name` and checks it has exactly `shape`.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&NamedTensor> {
        let t = self.get(name)?;
        if t.shape != shape {
            return Err(Error::Archive {
                name: name.to_string(),
                reason: format!("shape {:?} does not match architecture {:?}", t.shape, shape),
            });
        }
        Ok(t)
    }

    pub fn metadata_value(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Archive { name: key.to_string(), reason: "metadata key missing".into() })
    }

    /// Header describing this archive, with offsets in payload order.
    pub fn header(&self) -> Header {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let e = TensorEntry { name: t.name.clone(), shape: t.shape.clone(), offset };
                offset += 4 * t.data.len() as u64;
                e
            })
            .collect();
        Header {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            architecture: self.architecture.clone(),
            means: self.means.clone(),
            metadata: self.metadata.clone(),
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serialises");
        let payload_len: usize = self.tensors.iter().map(|t| 4 * t.data.len()).sum();
        let mut out = Vec::with_capacity(8 + header.len() + payload_len);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| Error::Format("weight archive shorter than its length prefix".into()))?;
        let header_len = usize::try_from(u64::from_le_bytes(len_bytes))
            .map_err(|_| Error::Format("weight archive header length overflows".into()))?;
        let header_end = 8usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Format(format!("weight archive header of {header_len} bytes is truncated")))?;
        let header: Header = serde_json::from_slice(&bytes[8..header_end])
            .map_err(|e| Error::Format(format!("weight archive header: {e}")))?;
        if header.format != FORMAT_NAME {
            return Err(Error::Format(format!("not a weight archive (format `{}`)", header.format)));
        }
        if header.version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported weight archive version {}", header.version)));
        }

        let payload = &bytes[header_end..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let count: usize = entry.shape.iter().product();
            let start = usize::try_from(entry.offset).ok();
            let range = start.and_then(|s| Some(s..s.checked_add(count.checked_mul(4)?)?));
            let raw = range.and_then(|r| payload.get(r)).ok_or_else(|| Error::Archive {
                name: entry.name.clone(),
                reason: format!("payload truncated: {count} values at byte {} not present", entry.offset),
            })?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push(NamedTensor { name: entry.name.clone(), shape: entry.shape.clone(), data });
        }
        Ok(WeightArchive { architecture: header.architecture, means: header.means, metadata: header.metadata, tensors })
    }

    /// SHA-256 of the serialised archive, hex encoded.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}
