//! `.ten` files: magic `TEN1`, `u32` rank, `u32` dims, little-endian `f32`
//! payload in row-major order.

use std::path::Path;

use crate::binio::{read_file, write_file_synced, LeCursor, LeWriter};
use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;
use crate::model::LatentImage;

pub const TENSOR_MAGIC: [u8; 4] = *b"TEN1";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::shape("tensor dims overflow"))?;
        if n != data.len() {
            return Err(Error::shape(format!("dims {dims:?} need {n} values, got {}", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn from_matrix(m: &FeatureMatrix) -> Self {
        Self {
            dims: vec![m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
        }
    }

    pub fn into_matrix(self) -> Result<FeatureMatrix> {
        match self.dims[..] {
            [r, c] => FeatureMatrix::new(r, c, self.data),
            _ => Err(Error::shape(format!("expected a rank-2 tensor, got dims {:?}", self.dims))),
        }
    }

    pub fn from_latent(l: &LatentImage) -> Self {
        Self {
            dims: vec![l.channels(), l.height(), l.width()],
            data: l.as_slice().to_vec(),
        }
    }

    pub fn into_latent(self) -> Result<LatentImage> {
        match self.dims[..] {
            [c, h, w] => LatentImage::new(c, h, w, self.data),
            _ => Err(Error::shape(format!("expected a rank-3 tensor, got dims {:?}", self.dims))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = LeWriter::new(Vec::with_capacity(12 + 4 * (self.dims.len() + self.data.len())));
        let mut write = || -> std::io::Result<()> {
            w.bytes(&TENSOR_MAGIC)?;
            w.u32(self.dims.len() as u32)?;
            for &d in &self.dims {
                w.u32(d as u32)?;
            }
            w.f32s(&self.data)
        };
        write().expect("writing to a Vec cannot fail");
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let malformed = |reason: String| Error::Malformed {
            path: path.to_path_buf(),
            reason,
        };
        let mut cur = LeCursor::new(bytes);
        let magic = cur.array::<4>().ok_or_else(|| malformed("missing header".into()))?;
        if magic != TENSOR_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: TENSOR_MAGIC,
                found: magic,
            });
        }
        let rank = cur.u32().ok_or_else(|| malformed("missing rank".into()))? as usize;
        if rank > cur.remaining() / 4 {
            return Err(malformed(format!("rank {rank} exceeds file size")));
        }
        let dims: Vec<usize> = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Option<_>>().ok_or_else(|| malformed("truncated dims".into()))?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(4) == Some(cur.remaining()))
            .ok_or_else(|| malformed(format!("payload does not match dims {dims:?}")))?;
        let data = cur.f32s(n).expect("length checked");
        Ok(Self { dims, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file_synced(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_layout() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|v| v as f32 * 0.5).collect()).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(bytes.len(), 4 + 4 + 8 + 24);
        assert_eq!(&bytes[..8], b"TEN1\x02\0\0\0");
        let p = Path::new("x.ten");
        assert_eq!(Tensor::from_bytes(&bytes, p).unwrap(), t);
        assert!(Tensor::from_bytes(&bytes[..bytes.len() - 2], p).is_err());
        assert!(matches!(Tensor::from_bytes(b"TEN2\0\0\0\0", p), Err(Error::BadMagic { .. })));
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        let m = t.clone().into_matrix().unwrap();
        assert_eq!(Tensor::from_matrix(&m), t);
        assert!(t.into_latent().is_err());
    }
}
