//! Little-endian tensor container shared by concept modules, base
//! checkpoints and vocabularies.
//!
//! ```text
//! magic      4 bytes
//! version    u32
//! meta_len   u32, then meta_len bytes of UTF-8 JSON
//! count      u32
//! count × { name_len u32, name, ndim u32, dims u64 × ndim, data f32 × Π dims }
//! ```
//!
//! Trailing bytes are rejected.

use std::path::Path;

use mbtensor::Tensor;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub magic: [u8; 4],
    pub version: u32,
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.metadata).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], magic: [u8; 4], version: u32, kind: &'static str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let found_magic = r.take(4)?;
        if found_magic != magic {
            return Err(Error::Parse(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(found_magic),
                String::from_utf8_lossy(&magic)
            )));
        }
        let found_version = r.u32()?;
        if found_version != version {
            return Err(Error::Version {
                kind,
                found: found_version,
                expected: version,
            });
        }
        let meta_len = r.u32()? as usize;
        let metadata = serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Parse(format!("metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 12));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::Parse(format!("tensor name: {e}")))?
                .to_string();
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(Error::Parse(format!("tensor {name:?} has {ndim} dimensions")));
            }
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u64()? as usize);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Parse(format!("tensor {name:?} is too large")))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Parse("overflow".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push((name, Tensor::new(dims, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Parse(format!("{} trailing bytes after last tensor", bytes.len() - r.pos)));
        }
        Ok(Self {
            magic,
            version,
            metadata,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, magic: [u8; 4], version: u32, kind: &'static str) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, magic, version, kind)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Parse(format!("missing tensor {name:?}")))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Parse(format!("truncated: wanted {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

/// Hex SHA-256 of raw bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 over the bit patterns of a sequence of named tensors.
pub fn tensors_sha256<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> String {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
