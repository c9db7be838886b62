//! Versioned tensor container used for every saved model.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 8 bytes   magic  "STRCNTCK"
//! u32       format version (currently 1)
//! u64       header length in bytes
//! header    UTF-8 JSON: {"kind", "meta", "tensors": [{"name", "shape", "offset", "len"}]}
//! payload   f32 values, tensor `i` starting at element `offset`
//! ```
//!
//! Readers ignore unknown JSON fields, so newer writers that only add
//! metadata stay readable; a higher format version is rejected.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"STRCNTCK";
pub const FORMAT_VERSION: u32 = 1;

/// A named `f32` array in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Model family, e.g. `"ssnet"` or `"counter"`.
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn tensor_map(&self) -> BTreeMap<String, NamedTensor> {
        self.tensors.iter().map(|t| (t.name.clone(), t.clone())).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let expect: usize = t.shape.iter().product();
            if expect != t.data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has {} values for shape {:?}",
                    t.name,
                    t.data.len(),
                    t.shape
                )));
            }
            entries.push(TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset,
                len: t.data.len(),
            });
            offset += t.data.len();
        }
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        })
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + header.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version > FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint format version {version} is newer than supported {FORMAT_VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let payload = &bytes[20 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let start = e.offset * 4;
            let end = start + e.len * 4;
            let raw = payload
                .get(start..end)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} exceeds payload", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(NamedTensor {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Checkpoint of the expected kind, or a descriptive error.
    pub fn load_kind(path: impl AsRef<Path>, kind: &str) -> Result<Self> {
        let ck = Self::load(path.as_ref())?;
        if ck.kind != kind {
            return Err(Error::Checkpoint(format!(
                "{} holds a '{}' checkpoint, expected '{kind}'",
                path.as_ref().display(),
                ck.kind
            )));
        }
        Ok(ck)
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex_digest(&bytes))
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new("ssnet", serde_json::json!({"widths": [4, 8, 16]}));
        ck.tensors.push(NamedTensor {
            name: "a".into(),
            shape: vec![2, 2],
            data: vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE],
        });
        ck.tensors.push(NamedTensor {
            name: "b".into(),
            shape: vec![0],
            data: vec![],
        });
        ck
    }

    #[test]
    fn bytes_round_trip() {
        let ck = sample();
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap(), ck);
    }

    #[test]
    fn rejects_newer_versions_and_garbage() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        assert!(Checkpoint::from_bytes(b"hello").is_err());
    }

    #[test]
    fn unknown_header_fields_are_ignored() {
        let header = br#"{"kind":"x","meta":{},"tensors":[],"added_later":true}"#;
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().kind, "x");
    }
}
