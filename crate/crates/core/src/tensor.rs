//! Dense row-major tensor of `f32` values plus the flat binary on-disk format.
//!
//! The binary format is: 8-byte magic `AONTENSR`, `u32` rank, `u32` dims, then
//! the payload as little-endian `f32`. All integers are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 8] = b"AONTENSR";
const MAX_RANK: u32 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dimension("tensor shape", "all dims >= 1", format!("{shape:?}")));
        }
        if n != data.len() {
            return Err(Error::dimension("tensor data", n, data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Element count along axis `i`, or 1 if the axis does not exist.
    pub fn dim_or(&self, i: usize, default: usize) -> usize {
        self.shape.get(i).copied().unwrap_or(default)
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dimension("reshape", n, self.data.len()));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::TensorFormat(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(TENSOR_MAGIC)
            )));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let rank = u32::from_le_bytes(u32buf);
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::TensorFormat(format!("unsupported rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            r.read_exact(&mut u32buf)?;
            let d = u32::from_le_bytes(u32buf);
            if d == 0 {
                return Err(Error::TensorFormat("zero-sized dimension".into()));
            }
            shape.push(d as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut u32buf)?;
            data.push(f32::from_le_bytes(u32buf));
        }
        Ok(Tensor { shape, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.write_to(&mut f)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        Self::read_from(&mut f)
    }
}
