//! Dense double-precision matrices and vectors.
//!
//! Everything in the crate is built from these two types. There is no
//! broadcasting: a shape mismatch is a programming error and panics with a
//! message naming the operation and both shapes. Accumulation order is fixed
//! (row-major, left to right) so repeated runs are bit-identical.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Row-major dense matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Dense column vector.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector {
    data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            if r > 0 {
                write!(f, "; ")?;
            }
            for c in 0..self.cols {
                if c > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{}", self.get(r, c))?;
            }
        }
        write!(f, "]")
    }
}

impl fmt::Debug for Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Vector{:?}", self.data)
    }
}

#[track_caller]
fn shape_check(ok: bool, op: &str, a: (usize, usize), b: (usize, usize)) {
    if !ok {
        panic!(
            "shape error in {op}: {}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        );
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data.
    #[track_caller]
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "shape error in from_vec: {} entries for {rows}x{cols}",
            data.len()
        );
        Self { rows, cols, data }
    }

    #[track_caller]
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "shape error in from_rows: ragged rows");
            data.extend_from_slice(row);
        }
        Self::from_vec(r, c, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Diagonal matrix with `v` on the diagonal.
    pub fn diag(v: &Vector) -> Self {
        let n = v.dim();
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = v[i];
        }
        m
    }

    /// Entries drawn uniformly from `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        Self::from_fn(rows, cols, |_, _| rng.gen_range(-bound..=bound))
    }

    /// Single-column matrix holding `v`.
    pub fn column(v: &Vector) -> Self {
        Self::from_vec(v.dim(), 1, v.data.clone())
    }

    /// Single-row matrix holding `v`.
    pub fn row(v: &Vector) -> Self {
        Self::from_vec(1, v.dim(), v.data.clone())
    }

    /// Stacks vectors as the columns of a matrix.
    #[track_caller]
    pub fn from_columns(cols: &[Vector]) -> Self {
        let n = cols.len();
        let d = cols.first().map_or(0, Vector::dim);
        let mut m = Self::zeros(d, n);
        for (j, col) in cols.iter().enumerate() {
            assert_eq!(col.dim(), d, "shape error in from_columns: ragged columns");
            for i in 0..d {
                m.data[i * n + j] = col[i];
            }
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = value;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col_vector(&self, c: usize) -> Vector {
        Vector::from((0..self.rows).map(|r| self.get(r, c)).collect::<Vec<_>>())
    }

    pub fn row_vector(&self, r: usize) -> Vector {
        Vector::from(self.row_slice(r).to_vec())
    }

    /// Columns `[start, start + len)` as a new matrix.
    pub fn col_block(&self, start: usize, len: usize) -> Mat {
        assert!(start + len <= self.cols, "col_block out of range");
        Mat::from_fn(self.rows, len, |r, c| self.get(r, start + c))
    }

    /// Rows `[start, start + len)` as a new matrix.
    pub fn row_block(&self, start: usize, len: usize) -> Mat {
        assert!(start + len <= self.rows, "row_block out of range");
        Mat::from_vec(
            len,
            self.cols,
            self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        )
    }

    /// Matrix product with left-to-right accumulation over the inner index.
    #[track_caller]
    pub fn matmul(&self, other: &Mat) -> Mat {
        shape_check(self.cols == other.rows, "matmul", self.shape(), other.shape());
        let (n, k, m) = (self.rows, self.cols, other.cols);
        if m == 1 {
            let out = (0..n)
                .map(|i| {
                    let row = &self.data[i * k..(i + 1) * k];
                    row.iter().zip(&other.data).fold(0.0, |acc, (a, b)| acc + a * b)
                })
                .collect();
            return Mat::from_vec(n, 1, out);
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let out_row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                let b_row = &other.data[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Mat::from_vec(n, m, out)
    }

    #[track_caller]
    pub fn matvec(&self, v: &Vector) -> Vector {
        shape_check(self.cols == v.dim(), "matvec", self.shape(), (v.dim(), 1));
        let out = (0..self.rows)
            .map(|r| {
                self.row_slice(r)
                    .iter()
                    .zip(&v.data)
                    .fold(0.0, |acc, (a, b)| acc + a * b)
            })
            .collect::<Vec<_>>();
        Vector::from(out)
    }

    /// `selfᵀ v` without materializing the transpose.
    #[track_caller]
    pub fn tmatvec(&self, v: &Vector) -> Vector {
        shape_check(self.rows == v.dim(), "tmatvec", self.shape(), (v.dim(), 1));
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let s = v[r];
            for (o, &a) in out.iter_mut().zip(self.row_slice(r)) {
                *o += a * s;
            }
        }
        Vector::from(out)
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    #[track_caller]
    pub fn add(&self, other: &Mat) -> Mat {
        self.zip_with(other, "add", |a, b| a + b)
    }

    #[track_caller]
    pub fn sub(&self, other: &Mat) -> Mat {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    #[track_caller]
    pub fn hadamard(&self, other: &Mat) -> Mat {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Mat {
        self.map(|a| a * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat::from_vec(self.rows, self.cols, self.data.iter().map(|&a| f(a)).collect())
    }

    /// In-place `self += s * other`.
    #[track_caller]
    pub fn axpy(&mut self, s: f64, other: &Mat) {
        shape_check(self.shape() == other.shape(), "axpy", self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    /// In-place `self += u ⊗ v`, scaled by `s`.
    #[track_caller]
    pub fn add_outer(&mut self, s: f64, u: &Vector, v: &Vector) {
        shape_check(
            self.rows == u.dim() && self.cols == v.dim(),
            "add_outer",
            self.shape(),
            (u.dim(), v.dim()),
        );
        for i in 0..self.rows {
            let ui = s * u[i];
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (a, &vj) in row.iter_mut().zip(&v.data) {
                *a += ui * vj;
            }
        }
    }

    /// Multiplies row `i` by `a[i]`, i.e. `Diag(a) · self`.
    #[track_caller]
    pub fn scale_rows(&self, a: &Vector) -> Mat {
        shape_check(self.rows == a.dim(), "scale_rows", self.shape(), (a.dim(), 1));
        Mat::from_fn(self.rows, self.cols, |r, c| a[r] * self.get(r, c))
    }

    #[track_caller]
    fn zip_with(&self, other: &Mat, op: &str, f: impl Fn(f64, f64) -> f64) -> Mat {
        shape_check(self.shape() == other.shape(), op, self.shape(), other.shape());
        Mat::from_vec(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    /// Largest absolute entry-wise difference.
    #[track_caller]
    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        shape_check(self.shape() == other.shape(), "max_abs_diff", self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, a| acc + a * a).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, a| f64::max(m, a.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|a| a.is_finite())
    }

    /// Sum of `self ⊙ other`.
    #[track_caller]
    pub fn frobenius_dot(&self, other: &Mat) -> f64 {
        shape_check(self.shape() == other.shape(), "frobenius_dot", self.shape(), other.shape());
        self.data.iter().zip(&other.data).fold(0.0, |acc, (a, b)| acc + a * b)
    }
}

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Self { data: vec![0.0; dim] }
    }

    pub fn filled(dim: usize, value: f64) -> Self {
        Self {
            data: vec![value; dim],
        }
    }

    pub fn one_hot(dim: usize, index: usize) -> Self {
        let mut v = Self::zeros(dim);
        v.data[index] = 1.0;
        v
    }

    pub fn uniform<R: Rng + ?Sized>(dim: usize, bound: f64, rng: &mut R) -> Self {
        Self::from((0..dim).map(|_| rng.gen_range(-bound..=bound)).collect::<Vec<_>>())
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[track_caller]
    pub fn dot(&self, other: &Vector) -> f64 {
        shape_check(self.dim() == other.dim(), "dot", (self.dim(), 1), (other.dim(), 1));
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |acc, (a, b)| acc + a * b)
    }

    #[track_caller]
    pub fn add(&self, other: &Vector) -> Vector {
        self.zip_with(other, "add", |a, b| a + b)
    }

    #[track_caller]
    pub fn sub(&self, other: &Vector) -> Vector {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    #[track_caller]
    pub fn hadamard(&self, other: &Vector) -> Vector {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Vector {
        self.map(|a| a * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Vector {
        Vector::from(self.data.iter().map(|&a| f(a)).collect::<Vec<_>>())
    }

    #[track_caller]
    fn zip_with(&self, other: &Vector, op: &str, f: impl Fn(f64, f64) -> f64) -> Vector {
        shape_check(self.dim() == other.dim(), op, (self.dim(), 1), (other.dim(), 1));
        Vector::from(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect::<Vec<_>>(),
        )
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Unit-norm copy; the zero vector maps to itself.
    pub fn l2_normalize(&self) -> Vector {
        let n = self.norm();
        if n == 0.0 {
            self.clone()
        } else {
            self.scale(1.0 / n)
        }
    }

    /// Numerically stable softmax (max subtraction).
    pub fn softmax(&self) -> Vector {
        softmax(&self.data).into()
    }

    pub fn outer(&self, other: &Vector) -> Mat {
        outer(self, other)
    }

    /// Entries `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Vector {
        Vector::from(self.data[start..start + len].to_vec())
    }

    pub fn concat(parts: &[Vector]) -> Vector {
        Vector::from(parts.iter().flat_map(|p| p.data.iter().copied()).collect::<Vec<_>>())
    }

    #[track_caller]
    pub fn max_abs_diff(&self, other: &Vector) -> f64 {
        shape_check(self.dim() == other.dim(), "max_abs_diff", (self.dim(), 1), (other.dim(), 1));
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|a| a.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Self { data }
    }
}

impl From<&[f64]> for Vector {
    fn from(data: &[f64]) -> Self {
        Self {
            data: data.to_vec(),
        }
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

/// `u ⊗ v = u vᵀ`.
pub fn outer(u: &Vector, v: &Vector) -> Mat {
    let mut m = Mat::zeros(u.dim(), v.dim());
    m.add_outer(1.0, u, v);
    m
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&a| (a - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
