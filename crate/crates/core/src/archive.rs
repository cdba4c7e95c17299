//! Binary container shared by model, dataset and cache files.
//!
//! Layout: 8-byte magic, `u32` LE version, `u64` LE length + JSON header,
//! `u64` LE count + `f32` LE payload, then a SHA-256 digest of everything
//! before it. Tensors are stored in the payload and referenced from the
//! header by offset.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MODEL_MAGIC: [u8; 8] = *b"PQMODEL\0";
pub const DATA_MAGIC: [u8; 8] = *b"PQDATA\0\0";
pub const CACHE_MAGIC: [u8; 8] = *b"PQCACHE\0";

const DIGEST_LEN: usize = 32;

/// Location of a tensor inside the payload.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRef {
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Default)]
pub struct ArchiveWriter {
    payload: Vec<f32>,
}

impl ArchiveWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: &Tensor) -> TensorRef {
        let r = TensorRef {
            shape: t.shape().to_vec(),
            offset: self.payload.len(),
        };
        self.payload.extend_from_slice(t.data());
        r
    }

    pub fn push_values(&mut self, v: &[f32]) -> TensorRef {
        self.push(&Tensor::from_slice(v))
    }

    /// Writes the archive atomically (temp file + rename).
    pub fn finish<H: Serialize>(self, path: &Path, magic: [u8; 8], header: &H) -> Result<()> {
        let json = serde_json::to_vec(header)?;
        let mut buf = Vec::with_capacity(8 + 4 + 16 + json.len() + 4 * self.payload.len() + DIGEST_LEN);
        buf.extend_from_slice(&magic);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        buf.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        for v in &self.payload {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);

        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("partial");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&buf)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }
}

pub struct ArchiveReader {
    pub header: Vec<u8>,
    payload: Vec<f32>,
}

impl ArchiveReader {
    /// Checks magic, then version, then digest.
    pub fn open(path: &Path, magic: [u8; 8]) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.len() < 8 || bytes[..8] != magic {
            return Err(Error::BadMagic(path.to_path_buf()));
        }
        let version = bytes
            .get(8..12)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::Checksum(path.to_path_buf()))?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        if bytes.len() < 12 + DIGEST_LEN {
            return Err(Error::Checksum(path.to_path_buf()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checksum(path.to_path_buf()));
        }

        let corrupt = || Error::Corrupt(format!("{}: inconsistent section lengths", path.display()));
        let mut pos = 12;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = body.get(pos..pos + n).ok_or_else(corrupt)?;
            pos += n;
            Ok(s)
        };
        let json_len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let header = take(json_len)?.to_vec();
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let raw = take(count.checked_mul(4).ok_or_else(corrupt)?)?;
        let payload = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if pos != body.len() {
            return Err(corrupt());
        }
        Ok(Self { header, payload })
    }

    pub fn header<H: for<'de> Deserialize<'de>>(&self) -> Result<H> {
        Ok(serde_json::from_slice(&self.header)?)
    }

    pub fn tensor(&self, r: &TensorRef) -> Result<Tensor> {
        let n: usize = r.shape.iter().product();
        let data = self
            .payload
            .get(r.offset..r.offset + n)
            .ok_or_else(|| Error::Corrupt(format!("tensor at {} (+{n}) beyond payload", r.offset)))?;
        Tensor::new(r.shape.clone(), data.to_vec())
    }

    pub fn values(&self, r: &TensorRef) -> Result<Vec<f32>> {
        Ok(self.tensor(r)?.into_data())
    }
}

/// Single-tensor file used for spilled activation caches.
pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = ArchiveWriter::new();
    let r = w.push(t);
    w.finish(path, CACHE_MAGIC, &r)
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let r = ArchiveReader::open(path, CACHE_MAGIC)?;
    let tr: TensorRef = r.header()?;
    r.tensor(&tr)
}
