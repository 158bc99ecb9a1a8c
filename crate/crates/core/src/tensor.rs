//! Dense row-major `f64` tensors and the `.shlt` tensor file format.
//!
//! File layout (all little-endian):
//!
//! | bytes        | content                          |
//! |--------------|----------------------------------|
//! | 8            | magic `b"SHLT\0\0\0\x01"`         |
//! | 4            | rank `r` (u32)                   |
//! | 4 * r        | dimensions (u32 each)            |
//! | 4 * prod(dims) | elements as IEEE-754 `f32`     |
//!
//! Values are narrowed to `f32` on write and widened back on read.

use std::fmt;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const TENSOR_MAGIC: [u8; 8] = *b"SHLT\0\0\0\x01";
/// Largest rank accepted by the file loader.
pub const MAX_RANK: usize = 3;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but {got} were supplied")]
    LengthMismatch { shape: Vec<usize>, expected: usize, got: usize },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank { op: &'static str, expected: usize, shape: Vec<usize> },
    #[error("{op}: {size} is not divisible by {by}")]
    NotDivisible { op: &'static str, size: usize, by: usize },
    #[error("non-finite element at flat index {0}")]
    NonFinite(usize),
    #[error("bad tensor file magic")]
    BadMagic,
    #[error("tensor file rank {0} exceeds the maximum of 3")]
    RankTooLarge(u32),
    #[error("tensor file has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("tensor file truncated")]
    Truncated,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor").field("shape", &self.shape).field("len", &self.data.len()).finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::LengthMismatch { shape, expected, got: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn from_fn(shape: Vec<usize>, f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self { shape, data: (0..n).map(f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Same data, new shape of equal element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self, TensorError> {
        Self::new(shape, self.data)
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Row `i` of the tensor viewed as `[len / last_dim, last_dim]`.
    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.last_dim()).unwrap_or_else(|| self.shape[..self.shape.len().saturating_sub(1)].iter().product())
    }

    pub fn expect_rank(&self, op: &'static str, rank: usize) -> Result<(), TensorError> {
        if self.rank() == rank {
            Ok(())
        } else {
            Err(TensorError::Rank { op, expected: rank, shape: self.shape.clone() })
        }
    }

    /// First non-finite element, if any.
    pub fn check_finite(&self) -> Result<(), TensorError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(TensorError::NonFinite(i)),
            None => Ok(()),
        }
    }

    /// Mean of the squared elements; 0 for an empty tensor.
    pub fn mean_square(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| v * v).sum::<f64>() / self.data.len() as f64
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Elementwise sum.
    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch { op: "add", left: self.shape.clone(), right: other.shape.clone() });
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    /// Serializes into the `.shlt` layout.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), TensorError> {
        if self.rank() > MAX_RANK {
            return Err(TensorError::RankTooLarge(self.rank() as u32));
        }
        self.check_finite()?;
        w.write_all(&TENSOR_MAGIC)?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, TensorError> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    /// Parses a complete `.shlt` buffer; trailing bytes are rejected.
    pub fn from_bytes(bytes: &[u8]) -> Result<Tensor, TensorError> {
        let mut cur = bytes;
        let t = Self::read_from(&mut cur)?;
        if !cur.is_empty() {
            return Err(TensorError::TrailingBytes(cur.len()));
        }
        Ok(t)
    }

    /// Reads one tensor from a stream, leaving any following bytes unread.
    pub fn read_from<R: Read>(mut r: R) -> Result<Tensor, TensorError> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if magic != TENSOR_MAGIC {
            return Err(TensorError::BadMagic);
        }
        let rank = read_u32(&mut r)?;
        if rank as usize > MAX_RANK {
            return Err(TensorError::RankTooLarge(rank));
        }
        let shape = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        read_exact(&mut r, &mut raw)?;
        let data = raw.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect();
        let t = Tensor { shape, data };
        t.check_finite()?;
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor, TensorError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TensorError> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), TensorError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => TensorError::Truncated,
        _ => TensorError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, TensorError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
