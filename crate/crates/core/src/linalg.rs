//! Small dense vector and matrix helpers.
//!
//! Dimensions in this crate are tiny (tens), so a hand-rolled row-major
//! matrix with a Cholesky solve is all the linear algebra we need.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn norm_sq<S: Real>(a: &[S]) -> S {
    dot(a, a)
}

pub fn norm<S: Real>(a: &[S]) -> S {
    norm_sq(a).sqrt()
}

pub fn dist<S: Real>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y)).sqrt()
}

pub fn sub<S: Real>(a: &[S], b: &[S]) -> Vec<S> {
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}

pub fn add<S: Real>(a: &[S], b: &[S]) -> Vec<S> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

pub fn scale<S: Real>(a: &[S], s: S) -> Vec<S> {
    a.iter().map(|&x| x * s).collect()
}

/// `y += a * x`
pub fn axpy<S: Real>(a: S, x: &[S], y: &mut [S]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

/// Rescales `v` in place so that its norm is at most `c`. Returns true if it clipped.
pub fn clip_norm<S: Real>(v: &mut [S], c: S) -> bool {
    let n = norm(v);
    if n > c && n > S::zero() {
        let s = c / n;
        v.iter_mut().for_each(|x| *x = *x * s);
        true
    } else {
        false
    }
}

pub fn all_finite<S: Real>(v: &[S]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Real")]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Real> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = S::one();
        }
        m
    }

    pub fn scaled_identity(n: usize, s: S) -> Self {
        let mut m = Self::identity(n);
        m.data.iter_mut().for_each(|x| *x = *x * s);
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch { context: "matrix data".into(), expected: rows * cols, got: data.len() });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::DimensionMismatch { context: "matrix row".into(), expected: c, got: row.len() });
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: S) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    /// `A v`
    pub fn matvec(&self, v: &[S]) -> Vec<S> {
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `out = A v`, no allocation.
    pub fn matvec_into(&self, v: &[S], out: &mut [S]) {
        for (i, o) in out.iter_mut().enumerate().take(self.rows) {
            *o = dot(self.row(i), v);
        }
    }

    /// `Aᵀ v`
    pub fn matvec_t(&self, v: &[S]) -> Vec<S> {
        let mut out = vec![S::zero(); self.cols];
        self.matvec_t_into(v, &mut out);
        out
    }

    pub fn matvec_t_into(&self, v: &[S], out: &mut [S]) {
        out.iter_mut().for_each(|o| *o = S::zero());
        for (i, &vi) in v.iter().enumerate().take(self.rows) {
            axpy(vi, self.row(i), out);
        }
    }

    pub fn matmul(&self, other: &Matrix<S>) -> Self {
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                for j in 0..other.cols {
                    let v = out.get(i, j) + a * other.get(k, j);
                    out.set(i, j, v);
                }
            }
        }
        out
    }

    pub fn add_assign_scaled(&mut self, other: &Matrix<S>, s: S) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + s * b;
        }
    }

    pub fn scaled(&self, s: S) -> Self {
        Matrix { rows: self.rows, cols: self.cols, data: scale(&self.data, s) }
    }

    /// Frobenius norm.
    pub fn frobenius(&self) -> S {
        norm(&self.data)
    }

    /// Largest singular value by power iteration on `AᵀA`.
    pub fn spectral_norm(&self) -> S {
        if self.rows == 0 || self.cols == 0 {
            return S::zero();
        }
        let mut v: Vec<S> = (0..self.cols).map(|j| S::one() + S::lit(0.01) * S::from_count(j)).collect();
        let mut sigma = S::zero();
        for _ in 0..500 {
            let av = self.matvec(&v);
            let w = self.matvec_t(&av);
            let nw = norm(&w);
            if nw == S::zero() {
                return S::zero();
            }
            v = scale(&w, S::one() / nw);
            let next = norm(&self.matvec(&v));
            if (next - sigma).abs() <= S::epsilon() * next {
                return next;
            }
            sigma = next;
        }
        sigma
    }

    /// Solves `A x = b` for symmetric positive definite `A` by Cholesky factorization.
    pub fn cholesky_solve(&self, b: &[S]) -> Result<Vec<S>> {
        let n = self.rows;
        if self.cols != n || b.len() != n {
            return Err(Error::DimensionMismatch { context: "cholesky_solve".into(), expected: n, got: b.len() });
        }
        let mut l = Self::zeros(n, n);
        for j in 0..n {
            let mut d = self.get(j, j);
            for k in 0..j {
                d = d - l.get(j, k) * l.get(j, k);
            }
            if !(d > S::zero()) {
                return Err(Error::Numerical("matrix is not positive definite".into()));
            }
            let d = d.sqrt();
            l.set(j, j, d);
            for i in j + 1..n {
                let mut s = self.get(i, j);
                for k in 0..j {
                    s = s - l.get(i, k) * l.get(j, k);
                }
                l.set(i, j, s / d);
            }
        }
        let mut z = vec![S::zero(); n];
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s = s - l.get(i, k) * z[k];
            }
            z[i] = s / l.get(i, i);
        }
        let mut x = vec![S::zero(); n];
        for i in (0..n).rev() {
            let mut s = z[i];
            for k in i + 1..n {
                s = s - l.get(k, i) * x[k];
            }
            x[i] = s / l.get(i, i);
        }
        Ok(x)
    }

    /// Smallest eigenvalue of a symmetric matrix via shifted power iteration.
    pub fn min_eigenvalue_sym(&self) -> S {
        let n = self.rows;
        if n == 0 {
            return S::zero();
        }
        let top = self.spectral_norm();
        // eigenvalues of (top I - A) are top - λ_i >= 0; the largest gives λ_min
        let mut shifted = Self::scaled_identity(n, top);
        shifted.add_assign_scaled(self, -S::one());
        top - shifted.spectral_norm()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cholesky_recovers_solution() {
        let a = Matrix::from_rows(&[vec![4.0, 1.0, 0.5], vec![1.0, 3.0, 0.2], vec![0.5, 0.2, 2.0]]).unwrap();
        let x = vec![1.0, -2.0, 0.5];
        let b = a.matvec(&x);
        let sol = a.cholesky_solve(&b).unwrap();
        for (s, t) in sol.iter().zip(&x) {
            assert_relative_eq!(*s, *t, epsilon = 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(a.cholesky_solve(&[1.0, 1.0]).is_err());
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        let a = Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, -5.0]]).unwrap();
        assert_relative_eq!(a.spectral_norm(), 5.0, epsilon = 1e-9);
        let s = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 7.0]]).unwrap();
        assert_relative_eq!(s.min_eigenvalue_sym(), 2.0, epsilon = 1e-9);
    }

    #[test]
    fn clip_norm_scales_down_only() {
        let mut v = vec![3.0f64, 4.0];
        assert!(clip_norm(&mut v, 1.0));
        assert_relative_eq!(norm(&v), 1.0, epsilon = 1e-15);
        let mut w = vec![0.1f32, 0.1];
        assert!(!clip_norm(&mut w, 1.0));
    }
}
