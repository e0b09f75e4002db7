//! Binary interchange for tensors.
//!
//! A single tensor is stored as the magic `TSR1`, a little-endian `u32` rank,
//! `rank` little-endian `u32` dimensions, then the row-major `f32` payload in
//! little-endian order.
//!
//! A weight archive is the magic `TSRA`, a `u32` entry count, then per entry a
//! `u32` name length, the UTF-8 name, and one embedded `TSR1` record. Entries
//! are written in lexicographic name order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"TSR1";
pub const ARCHIVE_MAGIC: &[u8; 4] = b"TSRA";

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Upper bound on elements accepted from a file, guards against corrupt headers.
const MAX_ELEMENTS: usize = 1 << 31;

impl Tensor {
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &d in self.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.len() * 4);
        for v in self.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    /// Reads one `TSR1` record. `path` is only used for error messages.
    pub fn read_from(r: &mut impl Read, path: &Path) -> Result<Self> {
        let io = |e| Error::io(path, e);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != TENSOR_MAGIC {
            return Err(format_err(path, format!("bad tensor magic {magic:?}")));
        }
        let rank = read_u32(r).map_err(io)? as usize;
        if rank > 8 {
            return Err(format_err(path, format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r).map_err(io)? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= MAX_ELEMENTS)
            .ok_or_else(|| format_err(path, format!("shape {shape:?} too large")))?;
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes).map_err(io)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(&shape, data)
    }
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::new();
    t.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = bytes.as_slice();
    let t = Tensor::read_from(&mut cursor, path)?;
    if !cursor.is_empty() {
        return Err(format_err(path, format!("{} trailing bytes", cursor.len())));
    }
    Ok(t)
}

/// Named collection of tensors, e.g. a full set of model weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    entries: BTreeMap<String, Tensor>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(ARCHIVE_MAGIC);
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            t.write_to(&mut buf).expect("writing to a Vec cannot fail");
        }
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let io = |e| Error::io(path, e);
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != ARCHIVE_MAGIC {
            return Err(format_err(path, format!("bad archive magic {magic:?}")));
        }
        let count = read_u32(&mut r).map_err(io)?;
        let mut archive = Archive::new();
        for _ in 0..count {
            let len = read_u32(&mut r).map_err(io)? as usize;
            if len > r.len() {
                return Err(format_err(path, "entry name runs past end of file"));
            }
            let (name, rest) = r.split_at(len);
            let name = std::str::from_utf8(name)
                .map_err(|_| format_err(path, "entry name is not UTF-8"))?
                .to_string();
            r = rest;
            let t = Tensor::read_from(&mut r, path)?;
            if archive.entries.insert(name.clone(), t).is_some() {
                return Err(format_err(path, format!("duplicate entry `{name}`")));
            }
        }
        if !r.is_empty() {
            return Err(format_err(path, format!("{} trailing bytes", r.len())));
        }
        Ok(archive)
    }
}
