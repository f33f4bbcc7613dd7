//! Dense numeric kernels with analytic derivatives, plus the central-difference
//! oracle used to validate every gradient in this crate.
//!
//! All kernels are pure functions with exact-shape contracts (no broadcasting).
//! Training-time math runs in `f64`; storage uses `f32`.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, Index, IndexMut, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Scalar type the core math is generic over: `f32` or `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum<Self>
    + fmt::Debug
    + fmt::Display
    + Default
    + 'static
{
    /// Lift an `f64` constant into this scalar type.
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("constant representable in scalar type")
    }
}

impl<T> Real for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + AddAssign
        + SubAssign
        + MulAssign
        + DivAssign
        + Sum<T>
        + fmt::Debug
        + fmt::Display
        + Default
        + 'static
{
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Config(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Config("ragged row lengths".into()));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        })
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

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Matrix<T> {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rank-1 update: `self[i,j] += col[i] * row[j]`.
    pub fn add_outer(&mut self, col: &[T], row: &[T]) {
        debug_assert_eq!(col.len(), self.rows);
        debug_assert_eq!(row.len(), self.cols);
        for i in 0..self.rows {
            let c = col[i];
            let dst = self.row_mut(i);
            for j in 0..row.len() {
                dst[j] += c * row[j];
            }
        }
    }

    /// Convert element type (used at the f64 compute / f32 storage boundary).
    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }
}

impl<T: Real> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T: Real> IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// `result[i,j] = sum_k x[i,k] * w[k,j] + b[j]`. No broadcasting; shapes must
/// match exactly.
pub fn affine_transform<T: Real>(x: &Matrix<T>, w: &Matrix<T>, b: &[T]) -> Result<Matrix<T>> {
    if x.cols() != w.rows() || b.len() != w.cols() {
        return Err(Error::shape("affine_transform", x.shape(), w.shape()));
    }
    let mut out = Matrix::zeros(x.rows(), w.cols());
    for i in 0..x.rows() {
        let xi = x.row(i);
        let oi = out.row_mut(i);
        oi.copy_from_slice(b);
        for (k, &xv) in xi.iter().enumerate() {
            let wk = w.row(k);
            for j in 0..wk.len() {
                oi[j] += xv * wk[j];
            }
        }
    }
    Ok(out)
}

/// `out[j] = sum_k x[k] * w[k,j] + b[j]` for a single row vector.
pub fn vec_affine<T: Real>(x: &[T], w: &Matrix<T>, b: &[T]) -> Result<Vec<T>> {
    if x.len() != w.rows() || b.len() != w.cols() {
        return Err(Error::shape("vec_affine", (1, x.len()), w.shape()));
    }
    let mut out = b.to_vec();
    for (k, &xv) in x.iter().enumerate() {
        let wk = w.row(k);
        for j in 0..wk.len() {
            out[j] += xv * wk[j];
        }
    }
    Ok(out)
}

/// `out[k] = sum_j v[j] * w[k,j]` (multiply by the transpose of `w`).
pub fn vec_mat_t<T: Real>(v: &[T], w: &Matrix<T>) -> Vec<T> {
    debug_assert_eq!(v.len(), w.cols());
    (0..w.rows())
        .map(|k| w.row(k).iter().zip(v).map(|(&a, &b)| a * b).sum())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Elementwise activation over a matrix.
pub fn activation<T: Real>(x: &Matrix<T>, kind: Activation) -> Matrix<T> {
    match kind {
        Activation::Sigmoid => x.map(sigmoid),
        Activation::Tanh => x.map(|v| v.tanh()),
        Activation::Relu => x.map(|v| v.max(T::zero())),
    }
}

/// Central-difference gradient: `(f(theta + eps e_i) - f(theta - eps e_i)) / (2 eps)`.
pub fn finite_difference_gradient<T, F>(mut f: F, theta: &[T], eps: T) -> Result<Vec<T>>
where
    T: Real,
    F: FnMut(&[T]) -> Result<T>,
{
    if eps <= T::zero() {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let mut point = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = point[i];
        point[i] = orig + eps;
        let plus = f(&point)?;
        point[i] = orig - eps;
        let minus = f(&point)?;
        point[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                context: "finite_difference_gradient".into(),
                coordinate: i,
            });
        }
        grad.push((plus - minus) / (T::c(2.0) * eps));
    }
    Ok(grad)
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs().max(n.abs()).max(1e-8))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheckReport {
    pub max_relative_error: f64,
    pub worst_parameter_index: usize,
    pub eps: f64,
}

/// Compare an analytic gradient against a numeric one coordinate by coordinate.
pub fn check_gradients<T: Real>(analytic: &[T], numeric: &[T], eps: f64) -> GradientCheckReport {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0usize;
    let mut max_err = 0.0f64;
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let e = relative_error(a.to_f64().unwrap(), n.to_f64().unwrap());
        if e > max_err {
            max_err = e;
            worst = i;
        }
    }
    GradientCheckReport {
        max_relative_error: max_err,
        worst_parameter_index: worst,
        eps,
    }
}

pub fn l2_norm<T: Real>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// Normalize to unit length in place; leaves the zero vector untouched.
pub fn l2_normalize<T: Real>(v: &mut [T]) {
    let n = l2_norm(v);
    if n > T::zero() {
        for x in v {
            *x /= n;
        }
    }
}
