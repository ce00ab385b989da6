//! Dense n-dimensional tensors over a configurable scalar precision.
//!
//! All numeric state in the crate lives in [`Tensor`]s. Precision is a
//! run-mode choice: `f32` for training throughput, `f64` whenever
//! finite-difference gradient checks are involved.

use crate::error::{Error, Result};
use num_traits::Float;
use rand::Rng;
use std::fmt;

/// Element dtype marker, used by checkpoint manifests and file headers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(Dtype::F32),
            "f64" => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Scalar element type for all numeric computation.
pub trait Real:
    Float + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn into_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 requires 4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn into_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 requires 8 bytes"))
    }
}

/// Dense tensor: positive extents plus a contiguous row-major buffer.
///
/// Invariant: `shape.iter().product() == data.len()`. A rank-0 shape is a
/// scalar holding exactly one value.
#[derive(Clone, PartialEq)]
pub struct Tensor<F: Real> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<&F> = self.data.iter().take(8).collect();
        write!(
            f,
            "Tensor{:?} {:?}{}",
            self.shape,
            preview,
            if self.data.len() > 8 { "..." } else { "" }
        )
    }
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} implies {expected} elements, data has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: F) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: Vec<usize>, v: F) -> Self {
        assert!(
            shape.iter().all(|&d| d > 0),
            "tensor extents must be positive, got {shape:?}"
        );
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![v; n],
        }
    }

    pub fn from_vec(data: Vec<F>) -> Self {
        assert!(!data.is_empty(), "vector tensor cannot be empty");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Contract("from_rows: no rows".into()));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Contract(format!(
                    "from_rows: row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    /// Entries sampled uniformly from `[lo, hi)`.
    pub fn uniform<R: Rng>(rng: &mut R, shape: Vec<usize>, lo: f64, hi: f64) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| F::from_f64(rng.gen_range(lo..hi)))
            .collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> Result<F> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        if self.shape.len() == 2 {
            Ok((self.shape[0], self.shape[1]))
        } else {
            Err(Error::Contract(format!(
                "expected rank-2 tensor, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn dim1(&self) -> Result<usize> {
        if self.shape.len() == 1 {
            Ok(self.shape[0])
        } else {
            Err(Error::Contract(format!(
                "expected rank-1 tensor, got shape {:?}",
                self.shape
            )))
        }
    }

    #[inline]
    pub fn at1(&self, i: usize) -> F {
        self.data[i]
    }

    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> F {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn row_slice(&self, r: usize) -> &[F] {
        debug_assert_eq!(self.shape.len(), 2);
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "zip",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    /// `self += alpha * x`.
    pub fn axpy(&mut self, alpha: F, x: &Self) {
        assert_eq!(self.shape, x.shape, "axpy shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&x.data) {
            *a = *a + alpha * *b;
        }
    }

    pub fn scale_in_place(&mut self, alpha: F) {
        for a in self.data.iter_mut() {
            *a = *a * alpha;
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| {
                let x = v.into_f64();
                x * x
            })
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * F::DTYPE.byte_width());
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    pub fn from_le_bytes(shape: Vec<usize>, bytes: &[u8]) -> Result<Self> {
        let n: usize = shape.iter().product();
        let w = F::DTYPE.byte_width();
        if bytes.len() != n * w {
            return Err(Error::Format(format!(
                "payload for shape {shape:?} needs {} bytes, got {}",
                n * w,
                bytes.len()
            )));
        }
        let data = bytes.chunks_exact(w).map(F::read_le).collect();
        Tensor::new(shape, data)
    }

    /// Lossy conversion between precisions (used by file formats pinned to f32).
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| G::from_f64(v.into_f64())).collect(),
        }
    }
}
