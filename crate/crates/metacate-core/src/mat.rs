//! Dense row-major f64 matrices with the small set of operations the
//! framework needs, including a Cholesky factorization for SPD solves.
//! Column vectors are n×1 matrices; scalars are 1×1.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dense row-major matrix of f64. Zero-row and zero-column matrices are
/// valid (they show up for empty query sets).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "Mat::from_vec: {} values for a {}x{} matrix",
            data.len(),
            rows,
            cols
        );
        Mat { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Mat {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn scalar(value: f64) -> Self {
        Mat::from_vec(1, 1, vec![value])
    }

    /// Column vector from a slice.
    pub fn col_vec(values: &[f64]) -> Self {
        Mat::from_vec(values.len(), 1, values.to_vec())
    }

    /// Row vector from a slice.
    pub fn row_vec(values: &[f64]) -> Self {
        Mat::from_vec(1, values.len(), values.to_vec())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// The single value of a 1×1 matrix.
    pub fn scalar_value(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "scalar_value on a {:?} matrix", self.shape());
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Mat) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(
            self.cols, other.rows,
            "matmul: {:?} x {:?}",
            self.shape(),
            other.shape()
        );
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &a) in arow.iter().enumerate() {
                if a != 0.0 {
                    let brow = &other.data[p * n..(p + 1) * n];
                    for (o, &b) in orow.iter_mut().zip(brow) {
                        *o += a * b;
                    }
                }
            }
        }
        Mat::from_vec(m, n, out)
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two equal-shape matrices.
    pub fn zip(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        assert!(
            self.same_shape(other),
            "zip: {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Mat) -> Mat {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        self.zip(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Mat) -> Mat {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Mat {
        self.map(|v| v * c)
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    /// (A + Aᵀ)/2 for a square matrix.
    pub fn symmetrize(&self) -> Mat {
        assert_eq!(self.rows, self.cols, "symmetrize on non-square matrix");
        Mat::from_fn(self.rows, self.cols, |i, j| {
            0.5 * (self.get(i, j) + self.get(j, i))
        })
    }

    /// Cholesky factorization A = L·Lᵀ of a symmetric positive definite
    /// matrix; reads the lower triangle only.
    pub fn cholesky(&self) -> Result<Chol> {
        if self.rows != self.cols {
            return Err(Error::Shape {
                op: "cholesky",
                detail: format!("matrix is {:?}, expected square", self.shape()),
            });
        }
        let n = self.rows;
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = self.data[i * n + j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(Error::Numerical {
                            op: "cholesky",
                            detail: format!(
                                "pivot {} at row {}; matrix is not positive definite",
                                s, i
                            ),
                        });
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Ok(Chol {
            l: Mat::from_vec(n, n, l),
        })
    }
}

/// Lower-triangular Cholesky factor, reusable for several right-hand sides.
#[derive(Clone, Debug)]
pub struct Chol {
    l: Mat,
}

impl Chol {
    pub fn factor(&self) -> &Mat {
        &self.l
    }

    /// Solve A·X = B for X given A = L·Lᵀ.
    pub fn solve(&self, b: &Mat) -> Mat {
        let n = self.l.rows();
        assert_eq!(b.rows(), n, "chol solve: rhs has {} rows, expected {}", b.rows(), n);
        let k = b.cols();
        let mut x = b.data().to_vec();
        let l = self.l.data();
        // Forward substitution L·Y = B.
        for i in 0..n {
            for p in 0..i {
                let lip = l[i * n + p];
                if lip != 0.0 {
                    for c in 0..k {
                        x[i * k + c] -= lip * x[p * k + c];
                    }
                }
            }
            let d = l[i * n + i];
            for c in 0..k {
                x[i * k + c] /= d;
            }
        }
        // Back substitution Lᵀ·X = Y.
        for i in (0..n).rev() {
            for p in (i + 1)..n {
                let lpi = l[p * n + i];
                if lpi != 0.0 {
                    for c in 0..k {
                        x[i * k + c] -= lpi * x[p * k + c];
                    }
                }
            }
            let d = l[i * n + i];
            for c in 0..k {
                x[i * k + c] /= d;
            }
        }
        Mat::from_vec(n, k, x)
    }
}
