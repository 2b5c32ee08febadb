//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  b"CVCP"
//! version u16 (currently 1)
//! count   u32
//! count entries, sorted by name:
//!     name_len u32, name (UTF-8)
//!     rank u32, rank extents (u32 each)
//!     product(extents) values (f32)
//! config  UTF-8 JSON blob, to end of file
//! ```
//!
//! Values are stored in f32 and widened back to f64 on load; loaded tensors
//! are inference-only. Entries are byte-stable: saving the same parameters
//! and config twice yields identical files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"CVCP";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Named tensors in strictly ascending name order.
    entries: Vec<(String, Tensor)>,
    /// Configuration snapshot serialized as JSON.
    config_json: String,
}

impl Checkpoint {
    pub fn new(mut entries: Vec<(String, Tensor)>, config_json: String) -> Result<Self> {
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        for pair in entries.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(Error::contract(format!(
                    "duplicate checkpoint entry '{}'",
                    pair[0].0
                )));
            }
        }
        for (name, _) in &entries {
            if name.is_empty() {
                return Err(Error::contract("checkpoint entry names must be non-empty"));
            }
        }
        serde_json::from_str::<serde_json::Value>(&config_json)
            .map_err(|e| Error::contract(format!("checkpoint config is not valid JSON: {}", e)))?;
        Ok(Checkpoint {
            entries,
            config_json,
        })
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn config_json(&self) -> &str {
        &self.config_json
    }

    /// Parse the config blob into a concrete type.
    pub fn config<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_str(&self.config_json)
            .map_err(|e| Error::contract(format!("checkpoint config mismatch: {}", e)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.entries.len())
            .map_err(|_| Error::contract("too many checkpoint entries"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, tensor) in &self.entries {
            let name_len = u32::try_from(name.len())
                .map_err(|_| Error::contract("checkpoint name too long"))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u32::try_from(tensor.rank())
                .map_err(|_| Error::contract("checkpoint rank too large"))?;
            out.extend_from_slice(&rank.to_le_bytes());
            for extent in tensor.shape() {
                let e = u32::try_from(*extent)
                    .map_err(|_| Error::contract("checkpoint extent too large"))?;
                out.extend_from_slice(&e.to_le_bytes());
            }
            for value in tensor.data() {
                let narrow = *value as f32;
                if !narrow.is_finite() {
                    return Err(Error::numeric(format!("checkpoint entry '{}'", name)));
                }
                out.extend_from_slice(&narrow.to_le_bytes());
            }
        }
        out.extend_from_slice(self.config_json.as_bytes());
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        decode(&bytes).map_err(|detail| Error::format(path, detail))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err(format!(
                "truncated while reading {} at offset {}",
                what, self.pos
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> std::result::Result<u16, String> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, String> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(format!("bad magic {:?}, expected \"CVCP\"", magic));
    }
    let version = cur.u16("version")?;
    if version != VERSION {
        return Err(format!("unsupported version {}", version));
    }
    let count = cur.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count);
    let mut last_name: Option<String> = None;
    for i in 0..count {
        let name_len = cur.u32("name length")? as usize;
        let name_bytes = cur.take(name_len, "entry name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| format!("entry {} name is not UTF-8", i))?
            .to_string();
        if let Some(prev) = &last_name {
            if *prev >= name {
                return Err(format!(
                    "entries out of order: '{}' after '{}'",
                    name, prev
                ));
            }
        }
        let rank = cur.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut len = 1usize;
        for _ in 0..rank {
            let extent = cur.u32("extent")? as usize;
            len = len
                .checked_mul(extent)
                .ok_or_else(|| format!("entry '{}' extent overflow", name))?;
            shape.push(extent);
        }
        let raw = cur.take(len * 4, "values")?;
        let mut data = Vec::with_capacity(len);
        for chunk in raw.chunks_exact(4) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(format!("entry '{}' holds a non-finite value", name));
            }
            data.push(v as f64);
        }
        let tensor = Tensor::new(shape, data).map_err(|e| format!("entry '{}': {}", name, e))?;
        last_name = Some(name.clone());
        entries.push((name, tensor));
    }
    let config_json = std::str::from_utf8(&bytes[cur.pos..])
        .map_err(|_| "config blob is not UTF-8".to_string())?
        .to_string();
    serde_json::from_str::<serde_json::Value>(&config_json)
        .map_err(|e| format!("config blob is not valid JSON: {}", e))?;
    Ok(Checkpoint {
        entries,
        config_json,
    })
}
