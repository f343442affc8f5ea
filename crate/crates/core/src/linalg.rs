//! Small dense helpers that nalgebra does not provide directly.

use nalgebra::{DMatrix, DVector, Dim, Matrix, RawStorage, SymmetricEigen};
#[cfg(not(feature = "std"))]
use num_traits::Float;

/// Cholesky factor of a symmetric positive definite matrix whose nonzeros lie
/// within `bandwidth` of the diagonal. Only the band is read and written.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    l: DMatrix<f64>,
    bandwidth: usize,
}

impl BandedCholesky {
    /// Factors `a`; returns `None` when a pivot is not strictly positive.
    pub fn factor(mut a: DMatrix<f64>, bandwidth: usize) -> Option<Self> {
        let n = a.nrows();
        for i in 0..n {
            let lo = i.saturating_sub(bandwidth);
            for j in lo..=i {
                let k0 = lo.max(j.saturating_sub(bandwidth));
                let mut sum = a[(i, j)];
                for k in k0..j {
                    sum -= a[(i, k)] * a[(j, k)];
                }
                if i == j {
                    if !(sum > 0.0) || !sum.is_finite() {
                        return None;
                    }
                    a[(i, i)] = sum.sqrt();
                } else {
                    a[(i, j)] = sum / a[(j, j)];
                }
            }
        }
        Some(Self { l: a, bandwidth })
    }

    pub fn solve_mut(&self, b: &mut [f64]) {
        let n = self.l.nrows();
        let bw = self.bandwidth;
        for i in 0..n {
            let mut s = b[i];
            for k in i.saturating_sub(bw)..i {
                s -= self.l[(i, k)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..(i + bw + 1).min(n) {
                s -= self.l[(k, i)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
    }
}

/// Symmetric square root `W^{1/2}` of a symmetric positive semidefinite matrix.
/// Tiny negative eigenvalues from rounding are clamped to zero.
pub fn sym_sqrt(w: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(w.clone());
    let root = eig.eigenvalues.map(|e| e.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn max_abs_matrix<R: Dim, C: Dim, S: RawStorage<f64, R, C>>(m: &Matrix<f64, R, C, S>) -> f64 {
    m.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}
