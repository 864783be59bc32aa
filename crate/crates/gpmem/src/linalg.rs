//! Small dense linear algebra: just enough for exact GP conditioning.
//!
//! Matrices are row-major `Vec<f64>`. Everything here is O(n^3) at worst,
//! which is fine for memo tables of the sizes this crate targets.

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "dimension mismatch");
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let mut acc = 0.0;
            for j in 0..self.cols {
                acc += self[(i, j)] * v[j];
            }
            out[i] = acc;
        }
        out
    }

    /// Force exact symmetry by averaging with the transpose.
    pub fn symmetrize(&mut self) {
        assert_eq!(self.rows, self.cols);
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let avg = 0.5 * (self[(i, j)] + self[(j, i)]);
                self[(i, j)] = avg;
                self[(j, i)] = avg;
            }
        }
    }

    pub fn add_diagonal(&mut self, value: f64) {
        assert_eq!(self.rows, self.cols);
        for i in 0..self.rows {
            self[(i, i)] += value;
        }
    }

    pub fn diag_mean(&self) -> f64 {
        assert_eq!(self.rows, self.cols);
        if self.rows == 0 {
            return 0.0;
        }
        (0..self.rows).map(|i| self[(i, i)]).sum::<f64>() / self.rows as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Lower-triangular Cholesky factor with L L^T = K.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    l: Matrix,
}

impl CholeskyFactor {
    /// Factor a symmetric positive-definite matrix.
    pub fn new(k: &Matrix) -> Result<Self> {
        assert_eq!(k.rows(), k.cols(), "matrix must be square");
        let n = k.rows();
        let mut l = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut sum = k[(i, j)];
                for p in 0..j {
                    sum -= l[(i, p)] * l[(j, p)];
                }
                if i == j {
                    if sum <= 0.0 || !sum.is_finite() {
                        return Err(Error::NotPositiveDefinite { attempted: vec![] });
                    }
                    l[(i, j)] = sum.sqrt();
                } else {
                    l[(i, j)] = sum / l[(j, j)];
                }
            }
        }
        Ok(CholeskyFactor { l })
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    pub fn lower(&self) -> &Matrix {
        &self.l
    }

    /// Solve L w = b by forward substitution.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        let mut w = vec![0.0; n];
        for i in 0..n {
            let mut sum = b[i];
            for j in 0..i {
                sum -= self.l[(i, j)] * w[j];
            }
            w[i] = sum / self.l[(i, i)];
        }
        w
    }

    /// Solve L^T w = b by back substitution.
    pub fn solve_upper(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        let mut w = vec![0.0; n];
        for i in (0..n).rev() {
            let mut sum = b[i];
            for j in (i + 1)..n {
                sum -= self.l[(j, i)] * w[j];
            }
            w[i] = sum / self.l[(i, i)];
        }
        w
    }

    /// Solve K x = b where K = L L^T.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.solve_upper(&self.solve_lower(b))
    }

    /// Solve L W = B columnwise. B is n x m; the result is n x m.
    pub fn solve_lower_matrix(&self, b: &Matrix) -> Matrix {
        let n = self.dim();
        assert_eq!(b.rows(), n);
        let mut out = Matrix::zeros(n, b.cols());
        for c in 0..b.cols() {
            let col: Vec<f64> = (0..n).map(|r| b[(r, c)]).collect();
            let sol = self.solve_lower(&col);
            for r in 0..n {
                out[(r, c)] = sol[r];
            }
        }
        out
    }

    /// Explicit inverse of the factored matrix via triangular solves.
    pub fn inverse(&self) -> Matrix {
        let n = self.dim();
        let mut inv = Matrix::zeros(n, n);
        for c in 0..n {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            let col = self.solve(&e);
            for r in 0..n {
                inv[(r, c)] = col[r];
            }
        }
        inv
    }

    /// Sum of log diagonal entries, i.e. 0.5 * log det K.
    pub fn log_diag_sum(&self) -> f64 {
        (0..self.dim()).map(|i| self.l[(i, i)].ln()).sum()
    }

    /// Extend the factor by one row given the new cross-covariance column
    /// `k_new` (length n) and the new diagonal entry `k_diag` (jitter already
    /// applied by the caller). Schur-complement append, O(n^2).
    pub fn extend(&mut self, k_new: &[f64], k_diag: f64) -> Result<()> {
        let n = self.dim();
        assert_eq!(k_new.len(), n);
        let w = self.solve_lower(k_new);
        let pivot = k_diag - w.iter().map(|v| v * v).sum::<f64>();
        if pivot <= 0.0 || !pivot.is_finite() {
            return Err(Error::NotPositiveDefinite { attempted: vec![] });
        }
        let mut l = Matrix::zeros(n + 1, n + 1);
        for i in 0..n {
            for j in 0..=i {
                l[(i, j)] = self.l[(i, j)];
            }
        }
        for j in 0..n {
            l[(n, j)] = w[j];
        }
        l[(n, n)] = pivot.sqrt();
        self.l = l;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_factors_to_identity() {
        let f = CholeskyFactor::new(&Matrix::identity(3)).unwrap();
        assert_eq!(*f.lower(), Matrix::identity(3));
    }

    #[test]
    fn hand_checked_2x2() {
        let k = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]);
        let f = CholeskyFactor::new(&k).unwrap();
        assert!((f.lower()[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((f.lower()[(1, 0)] - 1.0).abs() < 1e-12);
        assert!((f.lower()[(1, 1)] - 2.0_f64.sqrt()).abs() < 1e-12);
        assert_eq!(f.lower()[(0, 1)], 0.0);
    }

    #[test]
    fn reconstruction() {
        let k = Matrix::from_rows(&[
            vec![4.0, 1.0, 0.5],
            vec![1.0, 3.0, 0.2],
            vec![0.5, 0.2, 2.0],
        ]);
        let f = CholeskyFactor::new(&k).unwrap();
        let recon = f.lower().matmul(&f.lower().transpose());
        for i in 0..3 {
            for j in 0..3 {
                assert!((recon[(i, j)] - k[(i, j)]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn non_pd_rejected() {
        let k = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert!(CholeskyFactor::new(&k).is_err());
    }

    #[test]
    fn solve_matches_direct() {
        let k = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]);
        let f = CholeskyFactor::new(&k).unwrap();
        let x = f.solve(&[1.0, 2.0]);
        let b = k.matvec(&x);
        assert!((b[0] - 1.0).abs() < 1e-12);
        assert!((b[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn extend_matches_full_factorization() {
        let k = Matrix::from_rows(&[
            vec![4.0, 1.0, 0.5],
            vec![1.0, 3.0, 0.2],
            vec![0.5, 0.2, 2.0],
        ]);
        let k2 = Matrix::from_rows(&[vec![4.0, 1.0], vec![1.0, 3.0]]);
        let mut f = CholeskyFactor::new(&k2).unwrap();
        f.extend(&[0.5, 0.2], 2.0).unwrap();
        let full = CholeskyFactor::new(&k).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((f.lower()[(i, j)] - full.lower()[(i, j)]).abs() < 1e-12);
            }
        }
    }
}
