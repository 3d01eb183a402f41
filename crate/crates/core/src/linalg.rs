//! Dense linear-algebra kernels backed by `nalgebra`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SYMMETRY_TOL: f64 = 1e-8;
/// Eigenvalues in `[-CLAMP_TOL, 0)` are clamped to zero.
const CLAMP_TOL: f64 = 1e-6;

pub(crate) fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

pub(crate) fn from_dmatrix(m: &DMatrix<f64>) -> Tensor {
    let mut data = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            data.push(m[(r, c)]);
        }
    }
    Tensor::matrix(m.nrows(), m.ncols(), data)
}

/// Principal square root of a symmetric positive semi-definite matrix via
/// symmetric eigendecomposition.
pub fn matrix_sqrt_psd(a: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    if a.shape().len() != 2 || a.cols() != n {
        return Err(Error::Input {
            op: "matrix_sqrt_psd",
            detail: format!("expected a square matrix, got {:?}", a.shape()),
        });
    }
    let scale = a.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for i in 0..n {
        for j in (i + 1)..n {
            if (a.get(i, j) - a.get(j, i)).abs() > SYMMETRY_TOL * scale {
                return Err(Error::Input {
                    op: "matrix_sqrt_psd",
                    detail: format!("asymmetric at ({i},{j})"),
                });
            }
        }
    }
    let m = to_dmatrix(a);
    let sym = (&m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let min = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if min < -CLAMP_TOL * scale {
        return Err(Error::NotPsd {
            min_eigenvalue: min,
        });
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let s = v * DMatrix::from_diagonal(&roots) * v.transpose();
    // Exact symmetry; the product above can differ in the last ulp.
    let s = (&s + s.transpose()) * 0.5;
    Ok(from_dmatrix(&s))
}

/// Least-squares solver for a fixed full-column-rank matrix `A`
/// (`rows ≥ cols`), via the Cholesky factor of `AᵀA`.
#[derive(Clone, Debug)]
pub struct LeastSquares {
    at: DMatrix<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl LeastSquares {
    /// Fails when `A` is rank-deficient (Gram matrix not positive definite)
    /// or badly conditioned.
    pub fn new(a: &Tensor, max_condition: f64) -> Option<Self> {
        let m = to_dmatrix(a);
        if m.nrows() < m.ncols() {
            return None;
        }
        let at = m.transpose();
        let gram = &at * &m;
        let eig = gram.clone().symmetric_eigen();
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        if !(min > 0.0) || max / min > max_condition * max_condition {
            return None;
        }
        let chol = gram.cholesky()?;
        Some(Self { at, chol })
    }

    /// Minimizes `‖A x − b‖₂` for each row of `b` (a `k×rows` matrix of targets).
    pub fn solve_rows(&self, b: &Tensor) -> Tensor {
        let rhs = &self.at * to_dmatrix(b).transpose();
        let x = self.chol.solve(&rhs);
        from_dmatrix(&x.transpose())
    }
}

/// Mean and unbiased (`N − 1`) covariance of the rows of `x`.
pub fn mean_and_covariance(x: &Tensor) -> (Tensor, Tensor) {
    let n = x.rows();
    let d = x.cols();
    let mean = x.mean_rows();
    let mut cov = vec![0.0; d * d];
    for r in 0..n {
        let row = x.row_slice(r);
        for i in 0..d {
            let di = row[i] - mean.data()[i];
            for j in i..d {
                cov[i * d + j] += di * (row[j] - mean.data()[j]);
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / denom;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    (mean, Tensor::matrix(d, d, cov))
}
