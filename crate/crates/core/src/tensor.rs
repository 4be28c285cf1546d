//! Dense row-major tensors and the `SERT` binary file format.
//!
//! A [`Tensor`] is the value passed between feature extraction, augmentation
//! and the models. Arithmetic is always 64-bit; files store 32-bit floats by
//! default (checkpoints may opt into 64-bit payloads).
//!
//! SERT layout (all integers little-endian):
//!
//! ```text
//! "SERT" | u32 version = 1 | u8 dtype | u32 ndim | ndim x u64 dims | payload
//! ```
//!
//! dtype 1 is float32, dtype 2 is float64.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const SERT_MAGIC: [u8; 4] = *b"SERT";
pub const SERT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
}

impl Dtype {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            other => Err(Error::UnsupportedEncoding(format!("SERT dtype code {other}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
    /// Free-form annotations (hop size, mel count, ...). Not persisted in SERT.
    pub meta: BTreeMap<String, String>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} imply {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            dims,
            data,
            meta: BTreeMap::new(),
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; dims.iter().product()],
            meta: BTreeMap::new(),
        }
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; dims.iter().product()],
            meta: BTreeMap::new(),
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: (0..n).map(&mut f).collect(),
            meta: BTreeMap::new(),
        }
    }

    /// Build a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
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

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    /// Rows and columns of a 2-D tensor.
    pub fn shape2(&self) -> Result<(usize, usize)> {
        match self.dims.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::shape(format!("expected 2-D tensor, got {other:?}"))),
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.dims[1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.dims[1..].iter().product::<usize>();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (r, c) = self.shape2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            meta: self.meta.clone(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff on mismatched dims");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_sert_bytes(&self, dtype: Dtype) -> Vec<u8> {
        let mut buf = Vec::with_capacity(13 + 8 * self.dims.len() + dtype.width() * self.len());
        buf.extend_from_slice(&SERT_MAGIC);
        buf.extend_from_slice(&SERT_VERSION.to_le_bytes());
        buf.push(dtype as u8);
        buf.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match dtype {
            Dtype::F32 => {
                for &v in &self.data {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            Dtype::F64 => {
                for &v in &self.data {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        buf
    }

    pub fn from_sert_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != SERT_MAGIC {
            return Err(Error::MalformedContainer("missing SERT magic".into()));
        }
        let version = u32::from_le_bytes(cur.array()?);
        if version != SERT_VERSION {
            return Err(Error::UnsupportedEncoding(format!("SERT version {version}")));
        }
        let dtype = Dtype::from_code(cur.take(1)?[0])?;
        let ndim = u32::from_le_bytes(cur.array()?) as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(u64::from_le_bytes(cur.array()?) as usize);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::MalformedContainer("SERT dims overflow".into()))?;
        let payload = cur.take(count * dtype.width())?;
        if cur.pos != bytes.len() {
            return Err(Error::MalformedContainer("trailing bytes after SERT payload".into()));
        }
        let data = match dtype {
            Dtype::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        Tensor::new(dims, data)
    }

    pub fn write_sert(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_sert_bytes(Dtype::F32))
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_sert(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Tensor::from_sert_bytes(&bytes)
    }
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
            .ok_or_else(|| Error::MalformedContainer("truncated SERT data".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let b = t.to_sert_bytes(Dtype::F32);
        assert_eq!(&b[..4], &[0x53, 0x45, 0x52, 0x54]);
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(b[8], 1);
        assert_eq!(&b[9..13], &2u32.to_le_bytes());
        assert_eq!(&b[13..21], &1u64.to_le_bytes());
        assert_eq!(&b[21..29], &2u64.to_le_bytes());
        assert_eq!(&b[29..33], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 37);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::zeros(&[3]);
        let mut b = t.to_sert_bytes(Dtype::F32);
        b.pop();
        assert!(matches!(
            Tensor::from_sert_bytes(&b),
            Err(Error::MalformedContainer(_))
        ));
        b[0] = b'X';
        assert!(matches!(
            Tensor::from_sert_bytes(&b),
            Err(Error::MalformedContainer(_))
        ));
    }

    #[test]
    fn transpose_roundtrip() {
        let t = Tensor::from_fn(&[3, 5], |i| i as f64);
        let tt = t.transpose2().unwrap();
        assert_eq!(tt.dims(), &[5, 3]);
        assert_eq!(tt.at2(4, 2), t.at2(2, 4));
        assert_eq!(tt.transpose2().unwrap(), t);
    }

    proptest! {
        #[test]
        fn sert_f32_bytes_roundtrip_bit_exact(
            dims in prop::collection::vec(1usize..5, 1..4),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|i| (((seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64)) >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 1e3)
                .collect();
            let t = Tensor::new(dims, data).unwrap();
            let bytes = t.to_sert_bytes(Dtype::F32);
            let back = Tensor::from_sert_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_sert_bytes(Dtype::F32), bytes);
            let exact = t.to_sert_bytes(Dtype::F64);
            prop_assert_eq!(Tensor::from_sert_bytes(&exact).unwrap(), t);
        }
    }
}
