//! Dense row-major tensor and the `MSCM` binary tensor format.
//!
//! Storage is always `f64`. The [`DType`] tag records the precision the
//! tensor is meant to carry: an `F32` tensor has every value rounded to the
//! nearest `f32` and is written with 4-byte scalars.
//!
//! ```text
//! "MSCM" | dtype u8 (1 = f32, 2 = f64) | rank u8 | rank x u64 LE extents | LE payload
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MSCM_MAGIC: &[u8; 4] = b"MSCM";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    #[default]
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
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

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape,
            dtype: DType::F64,
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            dtype: DType::F64,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            dtype: DType::F64,
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            dtype: DType::F64,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Retags the tensor, rounding through `f32` when narrowing.
    pub fn with_dtype(mut self, dtype: DType) -> Self {
        if dtype == DType::F32 {
            for v in &mut self.data {
                *v = *v as f32 as f64;
            }
        }
        self.dtype = dtype;
        self
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

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => Err(Error::shape("dims2", format!("rank-2 expected, got {:?}", self.shape))),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::shape("dims3", format!("rank-3 expected, got {:?}", self.shape))),
        }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(Error::shape("dims4", format!("rank-4 expected, got {:?}", self.shape))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            dtype: self.dtype,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape("zip_map", other)?;
        Ok(Self {
            shape: self.shape.clone(),
            dtype: self.dtype,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape("add_assign", other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape("dot", other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape("max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn expect_same_shape(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    /// `[H, W, C]` -> `[C, H, W]`.
    pub fn hwc_to_chw(&self) -> Result<Self> {
        let (h, w, c) = self.dims3()?;
        let mut out = vec![0.0; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                let src = (y * w + x) * c;
                for ch in 0..c {
                    out[(ch * h + y) * w + x] = self.data[src + ch];
                }
            }
        }
        Tensor::new(vec![c, h, w], out)
    }

    /// `[C, H, W]` -> `[H, W, C]`.
    pub fn chw_to_hwc(&self) -> Result<Self> {
        let (c, h, w) = self.dims3()?;
        let mut out = vec![0.0; self.data.len()];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(y * w + x) * c + ch] = self.data[(ch * h + y) * w + x];
                }
            }
        }
        Tensor::new(vec![h, w, c], out)
    }

    /// Slices `len` entries of the leading axis starting at `start`.
    pub fn narrow0(&self, start: usize, len: usize) -> Result<Self> {
        let lead = *self
            .shape
            .first()
            .ok_or_else(|| Error::shape("narrow0", "scalar tensor"))?;
        if start + len > lead {
            return Err(Error::shape(
                "narrow0",
                format!("range {start}..{} exceeds extent {lead}", start + len),
            ));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Ok(Self {
            shape,
            dtype: self.dtype,
            data: self.data[start * inner..(start + len) * inner].to_vec(),
        })
    }

    /// Concatenates along the leading axis.
    pub fn cat0(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("cat0 of zero tensors".into()))?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.rank() == 0 || &p.shape[1..] != tail {
                return Err(Error::shape("cat0", format!("{:?} vs {:?}", first.shape, p.shape)));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Tensor::new(shape, data)
    }

    pub fn to_mscm_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 8 * self.rank() + self.len() * self.dtype.size());
        out.extend_from_slice(MSCM_MAGIC);
        out.push(self.dtype.code());
        out.push(self.rank() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match self.dtype {
            DType::F32 => {
                for &v in &self.data {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            DType::F64 => {
                for &v in &self.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_mscm_bytes(bytes: &[u8]) -> Result<Self> {
        let parse = |offset: usize, msg: &str| Error::Parse {
            offset,
            msg: msg.to_string(),
        };
        if bytes.len() < 6 {
            return Err(parse(bytes.len(), "truncated MSCM header"));
        }
        if &bytes[..4] != MSCM_MAGIC {
            return Err(parse(0, "bad MSCM magic"));
        }
        let dtype = DType::from_code(bytes[4]).ok_or_else(|| parse(4, "unknown dtype code"))?;
        let rank = bytes[5] as usize;
        let mut pos = 6;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let chunk = bytes.get(pos..pos + 8).ok_or_else(|| parse(pos, "truncated extents"))?;
            let d = u64::from_le_bytes(chunk.try_into().unwrap());
            shape.push(usize::try_from(d).map_err(|_| parse(pos, "extent overflows usize"))?);
            pos += 8;
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| parse(6, "element count overflows"))?;
        let need = n
            .checked_mul(dtype.size())
            .ok_or_else(|| parse(6, "payload size overflows"))?;
        let payload = &bytes[pos..];
        if payload.len() < need {
            return Err(parse(bytes.len(), "truncated payload"));
        }
        if payload.len() > need {
            return Err(parse(pos + need, "trailing bytes after payload"));
        }
        let data = match dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        Ok(Self { shape, dtype, data })
    }

    pub fn save_mscm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_mscm_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_mscm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_mscm_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::new(vec![0, 4], vec![]).unwrap().len(), 0);
    }

    #[test]
    fn mscm_header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let b = t.to_mscm_bytes();
        assert_eq!(&b[..4], b"MSCM");
        assert_eq!(b[4], 2);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..14], &2u64.to_le_bytes());
        assert_eq!(&b[14..22], &1u64.to_le_bytes());
        assert_eq!(&b[22..30], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 6 + 16 + 16);
    }

    #[test]
    fn mscm_rejects_truncation_and_bad_magic() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = t.to_mscm_bytes();
        assert!(matches!(
            Tensor::from_mscm_bytes(&b[..b.len() - 1]),
            Err(Error::Parse { .. })
        ));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(
            Tensor::from_mscm_bytes(&bad),
            Err(Error::Parse { offset: 0, .. })
        ));
        let mut bad = b;
        bad[4] = 9;
        assert!(Tensor::from_mscm_bytes(&bad).is_err());
    }

    #[test]
    fn f32_tensors_round_and_shrink() {
        let t = Tensor::new(vec![2], vec![0.1, 1.0]).unwrap().with_dtype(DType::F32);
        assert_eq!(t.data()[0], 0.1f32 as f64);
        let b = t.to_mscm_bytes();
        assert_eq!(b.len(), 6 + 8 + 8);
        assert_eq!(Tensor::from_mscm_bytes(&b).unwrap(), t);
    }

    #[test]
    fn layout_transposes_invert() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        assert_eq!(t.hwc_to_chw().unwrap().chw_to_hwc().unwrap(), t);
    }

    proptest! {
        #[test]
        fn mscm_roundtrip(shape in proptest::collection::vec(0usize..5, 0..4), seed in any::<u64>(), f32_tag in any::<bool>()) {
            let mut s = seed;
            let t = Tensor::from_fn(&shape, |_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            });
            let t = if f32_tag { t.with_dtype(DType::F32) } else { t };
            let back = Tensor::from_mscm_bytes(&t.to_mscm_bytes()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
