//! Dense tensors whose storage is accounted in the memory ledger.

pub mod kernels;

use std::fmt;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::ledger::{self, EventKind, Ledger};
use crate::rng::Rng;
use crate::scalar::Scalar;
use kernels::{gemm, MatRef};

/// Heap storage that reports its allocation and release to the ledger active
/// on the constructing thread.
pub struct Buffer<T: Copy> {
    data: Vec<T>,
    tag: String,
    ledger: Option<Arc<Ledger>>,
}

impl<T: Copy> Buffer<T> {
    pub fn from_vec(data: Vec<T>, tag: impl Into<String>) -> Self {
        let tag = tag.into();
        debug_assert!(!tag.contains(',') && !tag.contains('\n'), "tag `{tag}`");
        let ledger = ledger::active();
        let buf = Buffer { data, tag, ledger };
        if let Some(l) = &buf.ledger {
            l.report(EventKind::Alloc, buf.bytes(), &buf.tag);
        }
        buf
    }

    pub fn bytes(&self) -> u64 {
        (self.data.len() * std::mem::size_of::<T>()) as u64
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }
}

impl<T: Copy> Clone for Buffer<T> {
    fn clone(&self) -> Self {
        Buffer::from_vec(self.data.clone(), self.tag.clone())
    }
}

impl<T: Copy> Drop for Buffer<T> {
    fn drop(&mut self) {
        if let Some(l) = &self.ledger {
            l.report(EventKind::Free, self.bytes(), &self.tag);
        }
    }
}

impl<T: Copy + fmt::Debug> fmt::Debug for Buffer<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Buffer")
            .field("tag", &self.tag)
            .field("len", &self.data.len())
            .finish()
    }
}

/// Sampling law for [`Tensor::random`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FillDistribution {
    Uniform { lo: f64, hi: f64 },
    Normal { mean: f64, std: f64 },
}

#[derive(Clone)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    buf: Buffer<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<T> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("tag", &self.tag())
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>, tag: impl Into<String>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid("tensor", format!("invalid shape {shape:?}")));
        }
        if expected != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            buf: Buffer::from_vec(data, tag),
        })
    }

    pub fn full(shape: &[usize], value: T, tag: impl Into<String>) -> Result<Self> {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![value; n], tag)
    }

    pub fn zeros(shape: &[usize], tag: impl Into<String>) -> Result<Self> {
        Self::full(shape, T::zero(), tag)
    }

    /// Builds a rank-2 tensor from nested rows.
    pub fn from_rows(rows: &[&[f64]], tag: impl Into<String>) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("tensor", "ragged rows"));
        }
        let data = rows
            .iter()
            .flat_map(|r| r.iter().map(|&v| T::from_f64(v)))
            .collect();
        Self::from_vec(&[rows.len(), cols], data, tag)
    }

    /// A tensor of independent draws from `dist`, consuming values of `rng`
    /// in row-major order.
    pub fn random(
        rng: &mut Rng,
        shape: &[usize],
        dist: FillDistribution,
        tag: impl Into<String>,
    ) -> Result<Self> {
        let n: usize = shape.iter().product();
        let data = sample(rng, n, dist)?;
        Self::from_vec(shape, data, tag)
    }

    /// Overwrites every element with fresh draws, without reallocating.
    pub fn fill_random(&mut self, rng: &mut Rng, dist: FillDistribution) -> Result<()> {
        let fresh = sample::<T>(rng, self.len(), dist)?;
        self.data_mut().copy_from_slice(&fresh);
        Ok(())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn bytes(&self) -> u64 {
        self.buf.bytes()
    }

    pub fn tag(&self) -> &str {
        self.buf.tag()
    }

    pub fn data(&self) -> &[T] {
        self.buf.as_slice()
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        self.buf.as_mut_slice()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data().iter().map(|v| v.as_f64()).collect()
    }

    /// Leading dimension (the batch axis for activations).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all but the leading dimension.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn at2(&self, i: usize, j: usize) -> T {
        debug_assert_eq!(self.rank(), 2);
        self.data()[i * self.shape[1] + j]
    }

    /// Same data, new shape. No allocation.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.len() || shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    fn as_mat(&self, op: &'static str) -> Result<MatRef<'_, T>> {
        if self.rank() != 2 {
            return Err(Error::invalid(op, format!("expected a matrix, got shape {:?}", self.shape)));
        }
        Ok(MatRef::row_major(self.data(), self.shape[0], self.shape[1]))
    }

    fn product(
        op: &'static str,
        a: MatRef<'_, T>,
        b: MatRef<'_, T>,
        shapes: (&[usize], &[usize]),
        tag: impl Into<String>,
    ) -> Result<Self> {
        if a.cols != b.rows {
            return Err(Error::shape(op, shapes.0, shapes.1));
        }
        let mut out = vec![T::zero(); a.rows * b.cols];
        gemm(a, b, &mut out);
        Tensor::from_vec(&[a.rows, b.cols], out, tag)
    }

    /// `self · other` for `self: m×k`, `other: k×n`.
    pub fn matmul(&self, other: &Tensor<T>, tag: impl Into<String>) -> Result<Self> {
        let (a, b) = (self.as_mat("matmul")?, other.as_mat("matmul")?);
        Self::product("matmul", a, b, (self.shape(), other.shape()), tag)
    }

    /// `selfᵀ · other` for `self: k×m`, `other: k×n`, without materializing the transpose.
    pub fn matmul_transpose_left(&self, other: &Tensor<T>, tag: impl Into<String>) -> Result<Self> {
        let op = "matmul_transpose_left";
        let (a, b) = (self.as_mat(op)?.t(), other.as_mat(op)?);
        Self::product(op, a, b, (self.shape(), other.shape()), tag)
    }

    /// `self · otherᵀ` for `self: m×k`, `other: n×k`.
    pub fn matmul_transpose_right(&self, other: &Tensor<T>, tag: impl Into<String>) -> Result<Self> {
        let op = "matmul_transpose_right";
        let (a, b) = (self.as_mat(op)?, other.as_mat(op)?.t());
        Self::product(op, a, b, (self.shape(), other.shape()), tag)
    }

    /// Explicit transposed copy of a matrix.
    pub fn transpose(&self, tag: impl Into<String>) -> Result<Self> {
        let m = self.as_mat("transpose")?.t();
        let mut out = Vec::with_capacity(self.len());
        for i in 0..m.rows {
            out.extend((0..m.cols).map(|j| m.at(i, j)));
        }
        Tensor::from_vec(&[m.rows, m.cols], out, tag)
    }

    /// `u ⊗ v` for rank-1 `u` (length m) and `v` (length n).
    pub fn outer(u: &Tensor<T>, v: &Tensor<T>, tag: impl Into<String>) -> Result<Self> {
        if u.rank() != 1 || v.rank() != 1 {
            return Err(Error::invalid(
                "outer",
                format!("expected vectors, got {:?} and {:?}", u.shape(), v.shape()),
            ));
        }
        let a = MatRef::row_major(u.data(), u.len(), 1);
        let b = MatRef::row_major(v.data(), 1, v.len());
        Self::product("outer", a, b, (u.shape(), v.shape()), tag)
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Tensor<T>, tag: impl Into<String>) -> Result<Self> {
        self.zip_map("hadamard", other, |a, b| a * b, tag)
    }

    pub fn zip_map(
        &self,
        op: &'static str,
        other: &Tensor<T>,
        f: impl Fn(T, T) -> T,
        tag: impl Into<String>,
    ) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::from_vec(&self.shape, data, tag)
    }

    pub fn map(&self, f: impl Fn(T) -> T, tag: impl Into<String>) -> Result<Self> {
        let data = self.data().iter().map(|&v| f(v)).collect();
        Tensor::from_vec(&self.shape, data, tag)
    }

    pub fn map_in_place(&mut self, f: impl Fn(T) -> T) {
        for v in self.data_mut() {
            *v = f(*v);
        }
    }

    /// `self -= scale · other`, in place.
    pub fn sub_scaled_in_place(&mut self, other: &Tensor<T>, scale: T) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("sub_scaled", &self.shape, &other.shape));
        }
        for (p, &g) in self.data_mut().iter_mut().zip(other.data()) {
            *p = *p - scale * g;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Copies into another precision under a new tag.
    pub fn cast<U: Scalar>(&self, tag: impl Into<String>) -> Result<Tensor<U>> {
        let data = self.data().iter().map(|v| U::from_f64(v.as_f64())).collect();
        Tensor::from_vec(&self.shape, data, tag)
    }

    /// Copy with a different tag.
    pub fn copy_as(&self, tag: impl Into<String>) -> Result<Self> {
        Tensor::from_vec(&self.shape, self.data().to_vec(), tag)
    }

    /// Bitwise equality of shape and contents.
    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

// Negated comparisons so that NaN parameters are rejected.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
fn sample<T: Scalar>(rng: &mut Rng, n: usize, dist: FillDistribution) -> Result<Vec<T>> {
    match dist {
        FillDistribution::Uniform { lo, hi } => {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidDistribution(format!("uniform({lo}, {hi})")));
            }
            let law = Uniform::new(lo, hi)
                .map_err(|e| Error::InvalidDistribution(format!("uniform({lo}, {hi}): {e}")))?;
            Ok((0..n).map(|_| T::from_f64(rng.sample(law))).collect())
        }
        FillDistribution::Normal { mean, std } => {
            if !(std > 0.0) || !mean.is_finite() || !std.is_finite() {
                return Err(Error::InvalidDistribution(format!("normal({mean}, {std})")));
            }
            let law = Normal::new(mean, std)
                .map_err(|e| Error::InvalidDistribution(format!("normal({mean}, {std}): {e}")))?;
            Ok((0..n).map(|_| T::from_f64(law.sample(rng))).collect())
        }
    }
}
