//! Versioned binary container for named f32 tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"ICNT"
//! version  u16 (currently 1)
//! hlen     u64, length of the JSON header in bytes
//! header   JSON: {"kind": str, "meta": any, "tensors": [{"name", "shape", "offset"}]}
//! payload  f32 values, tensors back to back; `offset` counts elements
//! ```
//!
//! Used for network checkpoints, backbone snapshots and embedding caches.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ICNT";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

impl TensorFile {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn get(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("tensor {name} missing")))
    }

    /// Copy the named tensor into `dst`, checking the element count.
    pub fn copy_into(&self, name: &str, dst: &mut [f32]) -> Result<()> {
        let t = self.get(name)?;
        if t.data.len() != dst.len() {
            return Err(Error::Format(format!(
                "tensor {name}: expected {} values, file has {}",
                dst.len(),
                t.data.len()
            )));
        }
        dst.copy_from_slice(&t.data);
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|t| {
                let e = Entry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    offset,
                };
                offset += t.data.len();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(14 + header.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
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
        let bad = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 14 || &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes")) as usize;
        let payload_start = 14usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[14..payload_start])?;
        let payload = &bytes[payload_start..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset * 4;
            let end = start + n * 4;
            if end > payload.len() {
                return Err(Error::Format(format!("tensor {} truncated", e.name)));
            }
            let data = payload[start..end]
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

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn bytes_round_trip(
            a in prop::collection::vec(-1e6f32..1e6, 0..40),
            b in prop::collection::vec(-1.0f32..1.0, 1..10),
        ) {
            let mut f = TensorFile::new("test", serde_json::json!({"seed": 3}));
            f.push("a", vec![a.len()], a.clone());
            f.push("b", vec![1, b.len()], b.clone());
            let back = TensorFile::from_bytes(&f.to_bytes()).unwrap();
            prop_assert_eq!(back, f);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(TensorFile::from_bytes(b"nope").is_err());
        let mut bytes = TensorFile::new("k", serde_json::Value::Null).to_bytes();
        bytes[4] = 9;
        assert!(TensorFile::from_bytes(&bytes).is_err());
        let mut f = TensorFile::new("k", serde_json::Value::Null);
        f.push("x", vec![4], vec![1.0; 4]);
        let bytes = f.to_bytes();
        assert!(TensorFile::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn missing_file_is_reported() {
        let err = TensorFile::read(Path::new("/nonexistent/x.ckpt")).unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)));
    }
}
