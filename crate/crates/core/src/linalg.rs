//! Dense linear-algebra helpers.
//!
//! Problems in this crate are tiny (at most a few hundred state-action
//! pairs), so everything is solved exactly with dense factorizations: LU
//! with partial pivoting for linear systems, symmetric eigendecompositions
//! for pseudo-inverses and definiteness tests, SVD for operator norms.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Solve `m x = rhs` by LU with partial pivoting.
pub fn solve(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    m.clone()
        .lu()
        .solve(rhs)
        .ok_or_else(|| Error::Numerical(format!("singular {}x{} system", m.nrows(), m.ncols())))
}

/// Solve `m X = rhs` for a matrix right-hand side.
pub fn solve_matrix(m: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .lu()
        .solve(rhs)
        .ok_or_else(|| Error::Numerical(format!("singular {}x{} system", m.nrows(), m.ncols())))
}

/// Pseudo-inverse of a symmetric positive-semidefinite matrix, with a flag
/// reporting whether any eigenvalue was truncated (rank deficiency).
pub fn symmetric_pinv(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let n = m.nrows();
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let max_abs = eig
        .eigenvalues
        .iter()
        .fold(0.0f64, |acc, &v| acc.max(v.abs()));
    let tol = max_abs.max(1.0) * 1e-12;
    let mut dropped = false;
    let inv_vals: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&v| {
            if v.abs() <= tol {
                dropped = true;
                0.0
            } else {
                1.0 / v
            }
        })
        .collect();
    let d = DMatrix::from_diagonal(&DVector::from_vec(inv_vals));
    let pinv = &eig.eigenvectors * d * eig.eigenvectors.transpose();
    let _ = n;
    (pinv, dropped)
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().svd(false, false).singular_values.max()
}

/// Largest eigenvalue of the symmetric part `(m + m^T)/2`.
pub fn max_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen().eigenvalues.max()
}

/// Minimum-norm least-squares solution of `m x = rhs` via SVD.
pub fn least_squares(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let svd = m.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    svd.solve(rhs, max_sv.max(1.0) * 1e-12)
        .map_err(|e| Error::Numerical(e.to_string()))
}

/// Quadratic form `x^T w x` for symmetric `w`.
pub fn quadratic_form(x: &DVector<f64>, w: &DMatrix<f64>) -> f64 {
    (x.transpose() * w * x)[(0, 0)]
}
