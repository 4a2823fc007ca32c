//! Versioned binary container of named `f32` matrices plus a JSON metadata
//! header. Layout:
//!
//! ```text
//! b"DMXCKPT\n" | version: u32 LE | header_len: u64 LE | header JSON | f32 LE payload
//! ```
//!
//! The header lists `{name, rows, cols}` per array in payload order.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint;

pub const CONTAINER_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"DMXCKPT\n";

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Array2<f32>)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
}

impl Container {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Container {
            kind: kind.to_string(),
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, array: Array2<f32>) {
        self.arrays.push((name.into(), array));
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f32>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn require(&self, name: &str) -> Result<&Array2<f32>> {
        self.get(name)
            .ok_or_else(|| Error::format(format!("{} checkpoint", self.kind), format!("missing array {name}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(name, a)| ArrayEntry {
                    name: name.clone(),
                    rows: a.nrows(),
                    cols: a.ncols(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("serializable header");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, a) in &self.arrays {
            for v in a.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::format("checkpoint", d);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CONTAINER_VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                found: version,
                expected: CONTAINER_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize.checked_add(header_len).filter(|e| *e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end]).map_err(|e| bad(&e.to_string()))?;
        let mut offset = header_end;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for entry in header.arrays {
            let len = entry.rows * entry.cols * 4;
            let chunk = bytes.get(offset..offset + len).ok_or_else(|| bad("truncated payload"))?;
            let values = chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let a = Array2::from_shape_vec((entry.rows, entry.cols), values).map_err(|e| bad(&e.to_string()))?;
            arrays.push((entry.name, a));
            offset += len;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Container {
            kind: header.kind,
            meta: header.meta,
            arrays,
        })
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(Error::io(&tmp))?;
            f.write_all(&bytes).map_err(Error::io(&tmp))?;
        }
        fs::rename(&tmp, path).map_err(Error::io(path))?;
        Ok(fingerprint::of_bytes(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(self, kind: &str) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::format("checkpoint", format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(self)
    }
}
