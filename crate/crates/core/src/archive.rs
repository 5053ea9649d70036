//! Single-file weight archive: a JSON manifest plus named `f64` arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"MVWA" | u32 version | u32 manifest_len | manifest (UTF-8 JSON)
//! u32 n_arrays | { u32 name_len | name | u64 len | len * f64 } *
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a write/read cycle is exact.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{io_err, MvError, Result};

const MAGIC: &[u8; 4] = b"MVWA";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct WeightArchive {
    pub manifest: serde_json::Value,
    pub arrays: Vec<(String, Vec<f64>)>,
}

impl WeightArchive {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, data) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(MvError::Archive("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(MvError::Archive(format!("unsupported version {version}")));
        }
        let mlen = r.u32()? as usize;
        let manifest = serde_json::from_slice(r.take(mlen)?)?;
        let n = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(n);
        for _ in 0..n {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|e| MvError::Archive(format!("array name is not UTF-8: {e}")))?
                .to_string();
            let len = r.u64()? as usize;
            let raw = r.take(
                len.checked_mul(8)
                    .ok_or_else(|| MvError::Archive("array too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push((name, data));
        }
        if r.pos != bytes.len() {
            return Err(MvError::Archive("trailing bytes".into()));
        }
        Ok(Self { manifest, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }

    pub fn array(&self, name: &str) -> Result<&[f64]> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d.as_slice())
            .ok_or_else(|| MvError::Archive(format!("missing array {name}")))
    }
}

/// Hex SHA-256 over the raw bits of a sequence of arrays.
pub fn hash_arrays<'a>(arrays: impl IntoIterator<Item = &'a [f64]>) -> String {
    let mut h = Sha256::new();
    for a in arrays {
        h.update((a.len() as u64).to_le_bytes());
        for v in a {
            h.update(v.to_le_bytes());
        }
    }
    hex_digest(h.finalize().as_slice())
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex_digest(Sha256::digest(bytes).as_slice())
}

fn hex_digest(d: &[u8]) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
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
            .ok_or_else(|| MvError::Archive("truncated archive".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
