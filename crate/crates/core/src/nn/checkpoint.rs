//! Checkpoint container: `WKCP` magic, `u32` format version, `u32` header
//! length, a UTF-8 JSON header, then every tensor as little-endian `f64`s in
//! header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"WKCP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config_hash: String,
    pub format_version: u32,
    pub kind: String,
    /// Model-specific metadata (architecture sizes, frozen statistics, ...).
    pub meta: serde_json::Value,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new(kind: &str, seed: u64, config_hash: &str, meta: serde_json::Value, params: ParamSet) -> Self {
        let (names, tensors) = params.parts();
        let entries = names
            .iter()
            .zip(tensors)
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect();
        Checkpoint {
            header: CheckpointHeader {
                config_hash: config_hash.to_string(),
                format_version: FORMAT_VERSION,
                kind: kind.to_string(),
                meta,
                seed,
                tensors: entries,
            },
            params,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = crate::json::to_sorted_string(&self.header);
        let mut out = Vec::with_capacity(12 + header.len() + 8 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (_, _, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |m: &str| Error::format(origin, m.to_string());
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| bad(&format!("header: {e}")))?;
        let mut off = 12 + hlen;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let raw = bytes
                .get(off..off + 8 * n)
                .ok_or_else(|| bad(&format!("truncated tensor {}", entry.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            off += 8 * n;
            names.push(entry.name.clone());
            tensors.push(Tensor::new(&entry.shape, data));
        }
        if off != bytes.len() {
            return Err(bad("trailing bytes after last tensor"));
        }
        Ok(Checkpoint {
            header,
            params: ParamSet::from_parts(names, tensors),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn expect_kind(&self, kind: &str, origin: &Path) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::format(
                origin,
                format!("expected a {kind} checkpoint, found {}", self.header.kind),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let mut p = ParamSet::new();
        p.add("a", Tensor::new(&[2, 2], vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE]));
        p.add("b", Tensor::vector(vec![]));
        let ck = Checkpoint::new("test", 9, "abc", serde_json::json!({"k": 1}), p);
        let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_truncation() {
        let mut p = ParamSet::new();
        p.add("a", Tensor::vector(vec![1.0, 2.0]));
        let bytes = Checkpoint::new("test", 0, "", serde_json::json!(null), p).to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3], Path::new("x.ckpt")).unwrap_err();
        assert!(err.to_string().contains("x.ckpt"));
    }
}
