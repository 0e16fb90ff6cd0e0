use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

/// Dense row-major matrix.
///
/// Column vectors are `n x 1`, row vectors `1 x n`. Activations for a batch
/// are stored with one sample per column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                detail: format!("{} entries for {rows}x{cols}", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn column(data: Vec<T>) -> Self {
        Self { rows: data.len(), cols: 1, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
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

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn col_to_vec(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == T::zero())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().map(|v| *v * *v).sum()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| f(*v)).collect() }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn scale_in_place(&mut self, s: T) {
        self.data.iter_mut().for_each(|v| *v = *v * s);
    }

    fn same_shape(&self, other: &Self, op: &'static str) {
        assert_eq!(
            self.shape(),
            other.shape(),
            "{op}: shape {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
    }

    pub fn add(&self, other: &Self) -> Self {
        self.same_shape(other, "add");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a + *b).collect();
        Self { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.same_shape(other, "sub");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a - *b).collect();
        Self { rows: self.rows, cols: self.cols, data }
    }

    pub fn hadamard(&self, other: &Self) -> Self {
        self.same_shape(other, "hadamard");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a * *b).collect();
        Self { rows: self.rows, cols: self.cols, data }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.same_shape(other, "add_assign");
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a = *a + *b);
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: T, other: &Self) {
        self.same_shape(other, "axpy");
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a = *a + alpha * *b);
    }

    /// Multiplies column `c` by `w[c]`.
    pub fn scale_columns(&self, w: &[T]) -> Self {
        assert_eq!(w.len(), self.cols, "scale_columns: weight length");
        let mut out = self.clone();
        for r in 0..self.rows {
            for (v, s) in out.row_mut(r).iter_mut().zip(w) {
                *v = *v * *s;
            }
        }
        out
    }

    /// Outer product of a column vector `u` (`n x 1`) with a weight row `w`
    /// (length `cols`): entry `(r, c)` is `u[r] * w[c]`.
    pub fn outer(u: &[T], w: &[T]) -> Self {
        Self::from_fn(u.len(), w.len(), |r, c| u[r] * w[c])
    }

    /// Column-wise inner products with a vector `v` of length `rows`.
    pub fn dot_columns(&self, v: &[T]) -> Vec<T> {
        assert_eq!(v.len(), self.rows, "dot_columns: vector length");
        let mut out = vec![T::zero(); self.cols];
        for (r, vr) in v.iter().enumerate() {
            for (o, x) in out.iter_mut().zip(self.row(r)) {
                *o = *o + *vr * *x;
            }
        }
        out
    }

    /// `self * other`
    pub fn matmul(&self, other: &Self) -> Self {
        gemm_op(self, false, other, false)
    }

    /// `self^T * other`
    pub fn t_matmul(&self, other: &Self) -> Self {
        gemm_op(self, true, other, false)
    }

    /// `self * other^T`
    pub fn matmul_t(&self, other: &Self) -> Self {
        gemm_op(self, false, other, true)
    }
}

/// Strides of a row-major matrix, optionally viewed transposed.
fn view<T>(m: &Matrix<T>, transposed: bool) -> (usize, usize, isize, isize) {
    let (r, c) = (m.rows, m.cols);
    if transposed {
        (c, r, 1, c as isize)
    } else {
        (r, c, c as isize, 1)
    }
}

fn gemm_op<T: Scalar>(a: &Matrix<T>, ta: bool, b: &Matrix<T>, tb: bool) -> Matrix<T> {
    let (m, k, rsa, csa) = view(a, ta);
    let (k2, n, rsb, csb) = view(b, tb);
    assert_eq!(k, k2, "matmul inner dimension: {:?}{} x {:?}{}", a.shape(), if ta { "^T" } else { "" }, b.shape(), if tb { "^T" } else { "" });
    let mut out = Matrix::zeros(m, n);
    if k == 0 {
        return out;
    }
    T::gemm(m, k, n, T::one(), &a.data, rsa, csa, &b.data, rsb, csb, T::zero(), &mut out.data, n as isize, 1);
    out
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    fn index(&self, (r, c): (usize, usize)) -> &T {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Matrix with i.i.d. `N(0, std^2)` entries drawn from the ChaCha8 stream `seed`.
///
/// Entries are filled in row-major order, so the result is bit-reproducible for
/// a fixed `(rows, cols, std, seed)`. `std = 0` gives the zero matrix.
pub fn gaussian_matrix<T: Scalar>(rows: usize, cols: usize, std: f64, seed: u64) -> Result<Matrix<T>> {
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyShape { rows, cols });
    }
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::Config(format!("gaussian std must be finite and nonnegative, got {std}")));
    }
    if std == 0.0 {
        return Ok(Matrix::zeros(rows, cols));
    }
    let mut r = rng::stream(seed);
    let data = (0..rows * cols).map(|_| T::of(std * rng::normal(&mut r))).collect();
    Ok(Matrix { rows, cols, data })
}

/// Root-mean-square of all entries.
pub fn rms_norm<T: Scalar>(v: &Matrix<T>) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::EmptyInput("rms_norm"));
    }
    Ok(rms_of(v.as_slice()))
}

pub(crate) fn rms_of<T: Scalar>(v: &[T]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    // scaled accumulation keeps tiny gradient entries from underflowing
    let m = v.iter().fold(0.0f64, |m, x| m.max(x.as_f64().abs()));
    if m == 0.0 || !m.is_finite() {
        return m;
    }
    let s: f64 = v.iter().map(|x| (x.as_f64() / m).powi(2)).sum();
    m * (s / v.len() as f64).sqrt()
}
