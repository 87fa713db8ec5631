//! Dense row-major matrices and the handful of kernels the encoder needs.
//!
//! Everything is generic over [`Real`] so the same code runs in `f32` for
//! serving and in `f64` when gradients are checked against finite
//! differences. Half precision only appears at the storage boundary, see
//! [`f16`].

pub mod f16;
mod ops;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

pub use ops::{gelu, gelu_derivative, gelu_scalar, layer_norm, masked_softmax_rows, LN_EPS};
pub(crate) use ops::{layer_norm_backward, layer_norm_traced, softmax_row_masked, NormTrace};

/// Floating point element type for matrices.
pub trait Real:
    Float
    + FromPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn erf(self) -> Self;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite float converts")
    }
}

impl Real for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Real for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("Matrix::from_rows", "ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row_vector(values: Vec<T>) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "Matrix::vstack",
                format!("{} vs {} columns", self.cols, other.cols),
            ));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Self {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "Matrix::add",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds `bias` to every row.
    pub fn add_row_bias(&mut self, bias: &[T]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(Error::shape(
                "Matrix::add_row_bias",
                format!("bias of {} for {} columns", bias.len(), self.cols),
            ));
        }
        for row in self.data.chunks_exact_mut(self.cols.max(1)) {
            for (x, &b) in row.iter_mut().zip(bias) {
                *x += b;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    /// Column sums, i.e. the gradient of a broadcast row bias.
    pub fn column_sums(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        for row in self.data.chunks_exact(self.cols.max(1)) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }
}

/// `a · b`.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    let n = b.cols;
    for i in 0..a.rows {
        let out_row = &mut out.data[i * n..(i + 1) * n];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let b_row = &b.data[k * n..(k + 1) * n];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_transpose_b<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.cols {
        return Err(Error::shape(
            "matmul_transpose_b",
            format!("{:?} x {:?}ᵀ", a.shape(), b.shape()),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ai = a.row(i);
        for j in 0..b.rows {
            let bj = b.row(j);
            let mut acc = T::zero();
            for (&x, &y) in ai.iter().zip(bj) {
                acc += x * y;
            }
            out.data[i * b.rows + j] = acc;
        }
    }
    Ok(out)
}

/// `aᵀ · b`, the shape of a weight gradient.
pub fn matmul_transpose_a<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.rows != b.rows {
        return Err(Error::shape(
            "matmul_transpose_a",
            format!("{:?}ᵀ x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    let n = b.cols;
    for r in 0..a.rows {
        let b_row = b.row(r);
        for (i, &ari) in a.row(r).iter().enumerate() {
            if ari == T::zero() {
                continue;
            }
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (o, &brj) in out_row.iter_mut().zip(b_row) {
                *o += ari * brj;
            }
        }
    }
    Ok(out)
}

/// Which (query, key) pairs may attend to each other. `true` means allowed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoolMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl BoolMask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allowed.push(f(i, j));
            }
        }
        Self {
            rows,
            cols,
            allowed,
        }
    }

    pub fn all(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::shape(
                "BoolMask::from_vec",
                format!("{} entries for {rows}x{cols}", allowed.len()),
            ));
        }
        Ok(Self {
            rows,
            cols,
            allowed,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.cols..(i + 1) * self.cols]
    }

    /// Errors on the first row with no permitted entry.
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.rows {
            if !self.row(i).iter().any(|&a| a) {
                return Err(Error::FullyMaskedRow { row: i });
            }
        }
        Ok(())
    }
}
