//! Dense row-major tensors and the neural kernels built on them.
//!
//! Spatial tensors are channels-last (`[H, W, C]`) everywhere in the crate.
//! Kernels are pure functions; every kernel checks its output for
//! non-finite values and fails instead of propagating them.

mod io;
pub mod ops;

pub use io::{read_rtn, read_rtn_from, write_rtn, write_rtn_to};

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

/// Element storage type tag, shared by the `.rtn` and `.rs3w` formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
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

/// Floating point element type. Implemented for `f32` (default) and `f64`
/// (verification runs).
pub trait Scalar: Float + Default + Debug + Send + Sync + 'static {
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

/// Decode little-endian bytes of `dtype` into `T`, converting if needed.
pub(crate) fn decode_le<T: Scalar>(bytes: &[u8], dtype: DType) -> Vec<T> {
    match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect(),
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|c| {
                let mut b = [0u8; 8];
                b.copy_from_slice(c);
                T::from_f64(f64::from_le_bytes(b))
            })
            .collect(),
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor<{}>{:?}", std::any::type_name::<T>(), self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn check_shape(op: &'static str, shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape(op, "shape must have at least one axis"));
    }
    if shape.contains(&0) {
        return Err(Error::shape(op, format!("zero-sized axis in {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape("Tensor::new", &shape)?;
        if n != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Construct from f64 values, rounding to `T`.
    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = check_shape("Tensor::full", &shape).expect("valid shape");
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n = check_shape("Tensor::from_fn", &shape).expect("valid shape");
        Tensor {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[a, b, c] => Ok((a, b, c)),
            s => Err(Error::shape(op, format!("expected rank-3 tensor, got {s:?}"))),
        }
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[a, b] => Ok((a, b)),
            s => Err(Error::shape(op, format!("expected rank-2 tensor, got {s:?}"))),
        }
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                debug_assert!(i < d);
                acc * d + i
            })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Fails with [`Error::NonFinite`] if any element is NaN or infinite.
    pub fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .fold(0.0f64, |m, v| m.max(v.as_f64().abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a.as_f64() - b.as_f64()).abs()))
    }

    /// Normwise relative difference `max|a-b| / max|other|` (absolute when
    /// `other` is identically zero).
    pub fn rel_diff(&self, other: &Self) -> f64 {
        let d = self.max_abs_diff(other);
        let s = other.max_abs();
        if s == 0.0 {
            d
        } else {
            d / s
        }
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with("mul", other, |a, b| a * b)
    }

    pub fn zip_with(&self, op: &'static str, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
        .ensure_finite(op)
    }

    /// Swap the first two axes of a `[H, W, C]` tensor.
    pub fn transpose_hw(&self) -> Result<Self> {
        let (h, w, c) = self.dims3("transpose_hw")?;
        let mut out = Vec::with_capacity(self.data.len());
        for j in 0..w {
            for i in 0..h {
                let base = (i * w + j) * c;
                out.extend_from_slice(&self.data[base..base + c]);
            }
        }
        Tensor::new([w, h, c], out)
    }

    /// Split the last axis at `at`, returning `[..., :at]` and `[..., at:]`.
    pub fn split_last(&self, at: usize) -> Result<(Self, Self)> {
        let c = self.last_dim();
        if at == 0 || at >= c {
            return Err(Error::shape("split_last", format!("split {at} of {c}")));
        }
        let rows = self.data.len() / c;
        let mut a = Vec::with_capacity(rows * at);
        let mut b = Vec::with_capacity(rows * (c - at));
        for row in self.data.chunks_exact(c) {
            a.extend_from_slice(&row[..at]);
            b.extend_from_slice(&row[at..]);
        }
        let mut sa = self.shape.clone();
        let mut sb = self.shape.clone();
        *sa.last_mut().unwrap() = at;
        *sb.last_mut().unwrap() = c - at;
        Ok((Tensor::new(sa, a)?, Tensor::new(sb, b)?))
    }

    /// Concatenate along the last axis.
    pub fn concat_last(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_last", "no inputs"))?;
        let lead = &first.shape[..first.ndim() - 1];
        for p in parts {
            if &p.shape[..p.ndim() - 1] != lead {
                return Err(Error::shape(
                    "concat_last",
                    format!("{:?} vs {:?}", first.shape, p.shape),
                ));
            }
        }
        let rows: usize = lead.iter().product();
        let total: usize = parts.iter().map(|p| p.last_dim()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let c = p.last_dim();
                out.extend_from_slice(&p.data[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Tensor::new(shape, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(vec![], vec![]).is_err());
        assert!(Tensor::<f32>::new([2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new([2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn non_finite_is_an_error() {
        let a = Tensor::<f32>::new([2], vec![1.0, f32::MAX]).unwrap();
        let err = a.add(&a).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "add" }));
    }

    #[test]
    fn transpose_twice_is_identity() {
        let t = Tensor::<f32>::from_fn([3, 5, 2], |i| i as f32);
        let tt = t.transpose_hw().unwrap();
        assert_eq!(tt.shape(), &[5, 3, 2]);
        assert_eq!(tt.get(&[4, 1, 1]), t.get(&[1, 4, 1]));
        assert_eq!(tt.transpose_hw().unwrap(), t);
    }

    #[test]
    fn split_and_concat_invert() {
        let t = Tensor::<f64>::from_fn([2, 3, 5], |i| i as f64);
        let (a, b) = t.split_last(2).unwrap();
        assert_eq!(a.shape(), &[2, 3, 2]);
        assert_eq!(Tensor::concat_last(&[&a, &b]).unwrap(), t);
    }
}
