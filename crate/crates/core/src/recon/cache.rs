use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use crate::archive::{self, ArchiveReader, TensorRef, CACHE_MAGIC};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A calibration cache held in memory or spilled to disk.
///
/// Spilled caches use the tensor-payload format of the model file and are
/// read back row by row.
pub enum Cache {
    Memory(Tensor),
    Disk { path: PathBuf, shape: Vec<usize>, data_offset: u64 },
}

impl Cache {
    /// Keeps `t` in memory unless it would push `used` past `budget`.
    pub fn store(t: Tensor, used: &mut usize, budget: usize, dir: &Path, name: &str) -> Result<Self> {
        let bytes = t.numel() * 4;
        if *used + bytes <= budget {
            *used += bytes;
            return Ok(Cache::Memory(t));
        }
        let path = dir.join(format!("{name}.pqc"));
        archive::save_tensor(&path, &t)?;
        Self::open(&path)
    }

    /// Opens a spilled cache, verifying its checksum once.
    pub fn open(path: &Path) -> Result<Self> {
        let reader = ArchiveReader::open(path, CACHE_MAGIC)?;
        let r: TensorRef = reader.header()?;
        if r.offset != 0 {
            return Err(Error::Corrupt(format!("{}: cache tensor must start the payload", path.display())));
        }
        let data_offset = 8 + 4 + 8 + reader.header.len() as u64 + 8;
        Ok(Cache::Disk {
            path: path.to_path_buf(),
            shape: r.shape,
            data_offset,
        })
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Cache::Memory(t) => t.shape(),
            Cache::Disk { shape, .. } => shape,
        }
    }

    pub fn rows(&self) -> usize {
        self.shape().first().copied().unwrap_or(0)
    }

    pub fn is_spilled(&self) -> bool {
        matches!(self, Cache::Disk { .. })
    }

    pub fn select_rows(&self, idx: &[usize]) -> Result<Tensor> {
        match self {
            Cache::Memory(t) => t.select_rows(idx),
            Cache::Disk {
                path,
                shape,
                data_offset,
            } => {
                let per: usize = shape[1..].iter().product();
                let mut f = File::open(path)?;
                let mut buf = vec![0u8; per * 4];
                let mut data = Vec::with_capacity(idx.len() * per);
                for &i in idx {
                    if i >= shape[0] {
                        return Err(Error::InvalidArgument(format!("row {i} out of bounds for {} rows", shape[0])));
                    }
                    f.seek(SeekFrom::Start(data_offset + (i * per * 4) as u64))?;
                    f.read_exact(&mut buf)?;
                    data.extend(buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())));
                }
                let mut s = shape.clone();
                s[0] = idx.len();
                Tensor::new(s, data)
            }
        }
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let idx: Vec<usize> = (start..end).collect();
        self.select_rows(&idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn spilled_rows_equal_memory_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::randn([10, 2, 3], 1.0, &mut r);
        let mut used = 0;
        let mem = Cache::store(t.clone(), &mut used, 1 << 20, dir.path(), "a").unwrap();
        let mut used = 0;
        let disk = Cache::store(t.clone(), &mut used, 8, dir.path(), "b").unwrap();
        assert!(!mem.is_spilled() && disk.is_spilled());
        let idx = [9, 0, 3, 3];
        assert_eq!(mem.select_rows(&idx).unwrap(), disk.select_rows(&idx).unwrap());
        assert_eq!(disk.slice_rows(0, 10).unwrap(), t);
        assert!(disk.select_rows(&[10]).is_err());
    }
}
