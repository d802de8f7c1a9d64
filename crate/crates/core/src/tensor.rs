//! Dense row-major tensors and the TSR1 binary container.
//!
//! TSR1 layout (all little-endian):
//!
//! ```text
//! b"TSR1\0\0\0\0"  rank: u32  extents: rank * u32  data: prod(extents) * f32
//! ```

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::real::Real;

pub const TSR1_MAGIC: [u8; 8] = *b"TSR1\0\0\0\0";

/// Upper bound on tensor rank accepted from untrusted input.
const MAX_RANK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel = checked_numel(&shape)?;
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} holds {} elements but {} were given",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor { shape, data: (0..n).map(&mut f).collect() }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extents of a rank-4 NCHW tensor.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::dim(format!("expected N,C,H,W tensor, got shape {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if checked_numel(&shape)? != self.data.len() {
            return Err(Error::dim(format!("cannot reshape {:?} into {:?}", self.shape, shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| U::from_f64(x.as_f64())).collect() }
    }

    /// Index of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|x| !x.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.first_non_finite() {
            Some(i) => Err(Error::numeric(what, format!("non-finite value at flat index {i}"))),
            None => Ok(()),
        }
    }

    /// Contiguous `[C,H,W]` slab of sample `n` in an NCHW tensor.
    pub fn sample(&self, n: usize) -> Result<Tensor<T>> {
        let [nn, c, h, w] = self.dims4()?;
        if n >= nn {
            return Err(Error::dim(format!("sample {n} out of range for batch {nn}")));
        }
        let len = c * h * w;
        Ok(Tensor { shape: vec![1, c, h, w], data: self.data[n * len..(n + 1) * len].to_vec() })
    }

    /// Stacks rank-4 tensors of identical `[1,C,H,W]`-compatible shape along N.
    pub fn stack_batch(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items.first().ok_or_else(|| Error::contract("empty batch"))?;
        let [_, c, h, w] = first.dims4()?;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut n = 0;
        for t in items {
            let [tn, tc, th, tw] = t.dims4()?;
            if (tc, th, tw) != (c, h, w) {
                return Err(Error::dim(format!("cannot stack {:?} with {:?}", t.shape, first.shape)));
            }
            n += tn;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { shape: vec![n, c, h, w], data })
    }

    pub fn to_tsr1_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(&TSR1_MAGIC);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in &self.data {
            out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
        out
    }

    /// Decodes one TSR1 record from the front of `bytes`, returning the
    /// tensor and the number of bytes consumed.
    pub fn from_tsr1_prefix(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(8)?;
        if magic != TSR1_MAGIC {
            return Err(Error::format("bad TSR1 magic"));
        }
        let rank = cur.u32()? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::format(format!("TSR1 rank {rank} outside 1..={MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = cur.u32()? as usize;
            if d == 0 {
                return Err(Error::format("TSR1 extent of zero"));
            }
            shape.push(d);
        }
        let numel = checked_numel(&shape).map_err(|_| Error::format("TSR1 extents overflow"))?;
        let byte_len = numel.checked_mul(4).ok_or_else(|| Error::format("TSR1 payload size overflows"))?;
        let payload = cur.take(byte_len)?;
        let data =
            payload.chunks_exact(4).map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)).collect();
        Ok((Tensor { shape, data }, cur.pos))
    }

    /// Decodes a buffer holding exactly one TSR1 record.
    pub fn from_tsr1_bytes(bytes: &[u8]) -> Result<Self> {
        let (t, used) = Self::from_tsr1_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::format(format!("{} trailing bytes after TSR1 record", bytes.len() - used)));
        }
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_tsr1_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsr1_bytes(&bytes)
    }
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::dim(format!("shape {shape:?} overflows")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("truncated TSR1 record"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
