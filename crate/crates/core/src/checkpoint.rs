//! Binary container for parameters and optimizer state.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "SIMCSEKT"
//! version u32      1
//! hlen    u64      byte length of the JSON header
//! header  hlen     {"meta": <any>, "blocks": [{"name": str, "len": int}, ...]}
//! data    8·Σlen   f64 values of every block, in header order
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const MAGIC: &[u8; 8] = b"SIMCSEKT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub blocks: Vec<(String, Vec<f64>)>,
}

#[derive(Serialize, Deserialize)]
struct BlockHeader {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    blocks: Vec<BlockHeader>,
}

impl Container {
    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            meta: self.meta.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|(name, v)| BlockHeader {
                    name: name.clone(),
                    len: v.len(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let n_values: usize = self.blocks.iter().map(|(_, v)| v.len()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 8 * n_values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, v) in &self.blocks {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::BadCheckpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::BadCheckpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let mut data = &body[hlen..];
        let mut blocks = Vec::with_capacity(header.blocks.len());
        for b in header.blocks {
            let need = b.len * 8;
            if data.len() < need {
                return Err(Error::BadCheckpoint(format!("truncated block {}", b.name)));
            }
            let values = data[..need]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            blocks.push((b.name, values));
            data = &data[need..];
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            meta: header.meta,
            blocks,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip_and_layout() {
        let c = Container {
            meta: serde_json::json!({"k": 1}),
            blocks: vec![("a".into(), vec![1.5, -2.0]), ("b".into(), vec![])],
        };
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 20 + hlen + 16);
        assert_eq!(&bytes[20 + hlen..20 + hlen + 8], &1.5f64.to_le_bytes());
        assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Container::from_bytes(b"nonsense").is_err());
    }
}
