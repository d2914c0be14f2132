//! Named-tensor container shared by base models, adapters and frame sidecars.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DDSDCKPT"                      8 bytes
//! version                         u32
//! config length, config bytes     u64 + UTF-8 (JSON)
//! tensor count                    u64
//! per tensor:
//!   name length, name bytes       u64 + UTF-8
//!   rank                          u64
//!   extents                       u64 × rank
//!   payload                       f64 × product(extents)
//! checksum                        u64: first 8 bytes of SHA-256 over everything before it
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DDSDCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Free-form JSON describing what the tensors belong to.
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(config: String) -> Self {
        Self { config, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::BadMagic);
        }
        let mut r = Reader { bytes, pos: MAGIC.len() };
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::VersionMismatch { found: version, expected: VERSION });
        }
        if bytes.len() < r.pos + 8 {
            return Err(Error::MalformedCheckpoint("missing checksum".into()));
        }
        let body = &bytes[..bytes.len() - 8];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        if checksum(body) != stored {
            return Err(Error::ChecksumMismatch);
        }
        let mut r = Reader { bytes: body, pos: r.pos };
        let config_len = r.u64()? as usize;
        let config = String::from_utf8(r.take(config_len)?.to_vec())
            .map_err(|_| Error::MalformedCheckpoint("config is not UTF-8".into()))?;
        let count = r.u64()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u64()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::MalformedCheckpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u64()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::MalformedCheckpoint(format!("extents of `{name}` overflow")))?;
            let payload = r.take(
                n.checked_mul(8).ok_or_else(|| Error::MalformedCheckpoint(format!("payload of `{name}` overflows")))?,
            )?;
            let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::MalformedCheckpoint(format!("{} trailing bytes before checksum", body.len() - r.pos)));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::MalformedCheckpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(r#"{"kind":"test"}"#.into());
        c.push("a/w", Tensor::matrix(2, 3, vec![1.0, -0.0, 2.5, f64::MIN_POSITIVE, 3.0, -7.25]).unwrap());
        c.push("b", Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.config, c.config);
        for ((n1, t1), (n2, t2)) in c.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert!(t1.bit_eq(t2));
        }
    }

    #[test]
    fn size_follows_layout() {
        let c = sample();
        let header = 8 + 4 + 8 + c.config.len() + 8;
        let entries: usize = c.tensors.iter().map(|(n, t)| 16 + 8 * t.shape().len() + n.len() + 8 * t.len()).sum();
        assert_eq!(c.to_bytes().len(), header + entries + 8);
        // 2-D "a/w": 16 + 16 + 3 + 48; 1-D "b": 16 + 8 + 1 + 32; header 43; checksum 8.
        assert_eq!(c.to_bytes().len(), 43 + 83 + 57 + 8);
    }

    #[test]
    fn corrupt_first_byte_is_bad_magic() {
        let mut b = sample().to_bytes();
        b[0] ^= 0xff;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::BadMagic)));
    }

    #[test]
    fn wrong_version_is_reported() {
        let mut b = sample().to_bytes();
        b[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::VersionMismatch { found: 9, expected: 1 })));
    }

    #[test]
    fn payload_corruption_fails_checksum() {
        let mut b = sample().to_bytes();
        let n = b.len();
        b[n - 20] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::ChecksumMismatch)));
    }

    #[test]
    fn truncation_is_detected() {
        let b = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(&b[..10]).is_err());
    }
}
