use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

static CHECKED: AtomicBool = AtomicBool::new(cfg!(debug_assertions));

/// Enables or disables rejection of non-finite entries in [`Tensor::new`].
///
/// Defaults to on in debug/test builds and off in release builds.
pub fn set_checked_mode(on: bool) {
    CHECKED.store(on, Ordering::Relaxed);
}

pub fn checked_mode() -> bool {
    CHECKED.load(Ordering::Relaxed)
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} holds {} entries but {} were given",
                shape,
                expected,
                data.len()
            )));
        }
        if checked_mode() {
            if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
                return Err(Error::Evaluation(format!(
                    "non-finite entry {} at flat index {pos}",
                    data[pos]
                )));
            }
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    /// Internal constructor; the caller guarantees `shape` matches `data`.
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self::raw(shape, vec![T::zero(); len])
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let len = shape.iter().product();
        Self::raw(shape, vec![value; len])
    }

    pub fn scalar(value: T) -> Self {
        Self::raw(vec![1, 1], vec![value])
    }

    /// Row vector `[1 × n]`.
    pub fn row_vector(values: &[T]) -> Self {
        Self::raw(vec![1, values.len()], values.to_vec())
    }

    /// Column vector `[n × 1]`.
    pub fn column(values: &[T]) -> Self {
        Self::raw(vec![values.len(), 1], values.to_vec())
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.requires_grad = on;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix (leading dimensions flattened).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Size of the trailing dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    /// The single entry of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::raw(vec![c, r], out)
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::Dimension(format!(
                "matmul of {:?} by {:?}",
                self.shape, other.shape
            )));
        }
        let (p, q, r) = (self.shape[0], self.shape[1], other.shape[1]);
        Ok(Self::raw(vec![p, r], matmul_kernel(&self.data, &other.data, p, q, r)))
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Converts every entry to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::raw(
            self.shape.clone(),
            self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        )
    }
}

/// `[p×q] · [q×r]`, i-k-j loop order.
pub(crate) fn matmul_kernel<T: Scalar>(a: &[T], b: &[T], p: usize, q: usize, r: usize) -> Vec<T> {
    let mut out = vec![T::zero(); p * r];
    for i in 0..p {
        let out_row = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == T::zero() {
                continue;
            }
            let b_row = &b[k * r..(k + 1) * r];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + aik * bv;
            }
        }
    }
    out
}

/// `[p×q] · [r×q]ᵀ`, i.e. row dot products.
pub(crate) fn matmul_nt_kernel<T: Scalar>(a: &[T], b: &[T], p: usize, q: usize, r: usize) -> Vec<T> {
    let mut out = vec![T::zero(); p * r];
    for i in 0..p {
        let a_row = &a[i * q..(i + 1) * q];
        for j in 0..r {
            let b_row = &b[j * q..(j + 1) * q];
            out[i * r + j] = dot(a_row, b_row);
        }
    }
    out
}

/// `[q×p]ᵀ · [q×r]`.
pub(crate) fn matmul_tn_kernel<T: Scalar>(a: &[T], b: &[T], q: usize, p: usize, r: usize) -> Vec<T> {
    let mut out = vec![T::zero(); p * r];
    for k in 0..q {
        let a_row = &a[k * p..(k + 1) * p];
        let b_row = &b[k * r..(k + 1) * r];
        for (i, &aki) in a_row.iter().enumerate() {
            if aki == T::zero() {
                continue;
            }
            let out_row = &mut out[i * r..(i + 1) * r];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + aki * bv;
            }
        }
    }
    out
}

/// Dot product accumulated in ascending index order.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}
