use std::fmt::Debug;
use std::io::{Read, Write};
use std::ops::{Add, AddAssign, Mul};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{PitError, Result};
use crate::sparsity::SparsityAnnotation;

/// Numeric element of a dense tensor.
pub trait Element:
    Copy
    + Send
    + Sync
    + Default
    + PartialEq
    + PartialOrd
    + Debug
    + 'static
    + Add<Output = Self>
    + Mul<Output = Self>
    + AddAssign
{
    const DTYPE: DType;

    fn zero() -> Self;
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
    fn to_le(self, out: &mut Vec<u8>);
    fn from_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn zero() -> Self {
        0.0
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn zero() -> Self {
        0.0
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u32 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl std::str::FromStr for DType {
    type Err = PitError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            _ => Err(PitError::InvalidArgument(format!("unknown dtype `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum Layout {
    /// Last axis contiguous.
    #[default]
    RowMajor,
    /// First axis contiguous.
    ColMajor,
}

impl Layout {
    pub fn code(self) -> u32 {
        match self {
            Layout::RowMajor => 0,
            Layout::ColMajor => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Layout::RowMajor => "row_major",
            Layout::ColMajor => "col_major",
        }
    }

    /// The dimension of a 2-D tensor that is contiguous in memory.
    pub fn contiguous_dim(self) -> usize {
        match self {
            Layout::RowMajor => 1,
            Layout::ColMajor => 0,
        }
    }
}

impl std::fmt::Display for Layout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor<T> {
    shape: Vec<usize>,
    layout: Layout,
    data: Vec<T>,
}

const MAGIC: &[u8; 4] = b"PITT";

impl<T: Element> DenseTensor<T> {
    pub fn zeros(shape: &[usize], layout: Layout) -> Self {
        DenseTensor {
            shape: shape.to_vec(),
            layout,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn zeros_2d(rows: usize, cols: usize) -> Self {
        Self::zeros(&[rows, cols], Layout::RowMajor)
    }

    pub fn from_vec(shape: &[usize], layout: Layout, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(PitError::Shape(format!(
                "buffer of {} elements for shape {shape:?}",
                data.len()
            )));
        }
        Ok(DenseTensor {
            shape: shape.to_vec(),
            layout,
            data,
        })
    }

    /// Row-major 2-D tensor.
    pub fn from_vec_2d(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::from_vec(&[rows, cols], Layout::RowMajor, data)
    }

    /// Row-major tensor with entries drawn uniformly from `[-1, 1)`.
    pub fn random(shape: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(rng.random_range(-1.0..1.0)))
            .collect();
        DenseTensor {
            shape: shape.to_vec(),
            layout: Layout::RowMajor,
            data,
        }
    }

    /// Row-major random tensor whose entries are zero outside the non-zero
    /// blocks of `ann`.
    pub fn random_sparse(ann: &SparsityAnnotation, seed: u64) -> Self {
        let [rows, cols] = ann.shape();
        let mut t = Self::random(&[rows, cols], seed);
        for r in 0..rows {
            for c in 0..cols {
                if !ann.element_nonzero(r, c) {
                    t.data[r * cols + c] = T::zero();
                }
            }
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn shape2(&self) -> Result<[usize; 2]> {
        match self.shape[..] {
            [r, c] => Ok([r, c]),
            _ => Err(PitError::Shape(format!(
                "expected a 2-D tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Element strides, honoring the layout.
    pub fn strides(&self) -> Vec<usize> {
        let rank = self.shape.len();
        let mut strides = vec![1; rank];
        match self.layout {
            Layout::RowMajor => {
                for d in (0..rank.saturating_sub(1)).rev() {
                    strides[d] = strides[d + 1] * self.shape[d + 1];
                }
            }
            Layout::ColMajor => {
                for d in 1..rank {
                    strides[d] = strides[d - 1] * self.shape[d - 1];
                }
            }
        }
        strides
    }

    /// `(row stride, column stride)` of a 2-D tensor.
    #[inline]
    pub(crate) fn strides2(&self) -> (usize, usize) {
        match self.layout {
            Layout::RowMajor => (self.shape[1], 1),
            Layout::ColMajor => (1, self.shape[0]),
        }
    }

    #[inline]
    pub fn get2(&self, r: usize, c: usize) -> T {
        let (rs, cs) = self.strides2();
        self.data[r * rs + c * cs]
    }

    #[inline]
    pub fn set2(&mut self, r: usize, c: usize, v: T) {
        let (rs, cs) = self.strides2();
        self.data[r * rs + c * cs] = v;
    }

    pub fn get(&self, index: &[usize]) -> T {
        let off: usize = index.iter().zip(self.strides()).map(|(i, s)| i * s).sum();
        self.data[off]
    }

    /// Same logical tensor in another memory layout. Callers pay for the copy
    /// explicitly; nothing in the engine converts layouts on its own.
    pub fn to_layout(&self, layout: Layout) -> Self {
        if layout == self.layout {
            return self.clone();
        }
        let mut out = Self::zeros(&self.shape, layout);
        let src_strides = self.strides();
        let dst_strides = out.strides();
        let mut index = vec![0usize; self.rank()];
        for _ in 0..self.data.len() {
            let s: usize = index.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
            let d: usize = index.iter().zip(&dst_strides).map(|(i, s)| i * s).sum();
            out.data[d] = self.data[s];
            for dim in (0..index.len()).rev() {
                index[dim] += 1;
                if index[dim] < self.shape[dim] {
                    break;
                }
                index[dim] = 0;
            }
        }
        out
    }

    pub fn cast<U: Element>(&self) -> DenseTensor<U> {
        DenseTensor {
            shape: self.shape.clone(),
            layout: self.layout,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Binary form: magic `PITT`, dtype code, rank, layout code (each u32
    /// little-endian, 16 bytes in total), `rank` u64 extents, then raw
    /// little-endian values in the declared layout.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + 8 * self.rank() + self.data.len() * T::DTYPE.size());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&T::DTYPE.code().to_le_bytes());
        buf.extend_from_slice(&(self.rank() as u32).to_le_bytes());
        buf.extend_from_slice(&self.layout.code().to_le_bytes());
        for &d in &self.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            v.to_le(&mut buf);
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if &header[..4] != MAGIC {
            return Err(PitError::InvalidArgument("not a PITT tensor file".into()));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
        let dtype = DType::from_code(word(4))
            .ok_or_else(|| PitError::InvalidArgument(format!("unknown dtype code {}", word(4))))?;
        if dtype != T::DTYPE {
            return Err(PitError::InvalidArgument(format!(
                "tensor file holds {dtype:?}, expected {:?}",
                T::DTYPE
            )));
        }
        let rank = word(8) as usize;
        let layout = match word(12) {
            0 => Layout::RowMajor,
            1 => Layout::ColMajor,
            c => {
                return Err(PitError::InvalidArgument(format!(
                    "unknown layout code {c}"
                )))
            }
        };
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * dtype.size()];
        r.read_exact(&mut raw)?;
        let data = raw.chunks_exact(dtype.size()).map(T::from_le).collect();
        Self::from_vec(&shape, layout, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}
