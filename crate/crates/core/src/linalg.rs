//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{Complex, DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// `(X + Xᵀ) / 2`.
pub fn symmetrize(x: &DMatrix<f64>) -> DMatrix<f64> {
    (x + x.transpose()) * 0.5
}

pub fn frobenius(x: &DMatrix<f64>) -> f64 {
    x.norm()
}

/// `‖a − b‖_F / max(1, ‖b‖_F)`.
pub fn relative_difference(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

pub fn max_abs(x: &DMatrix<f64>) -> f64 {
    x.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Largest entry of `|X − Xᵀ|`, scaled by `max(1, max|X|)`.
pub fn asymmetry(x: &DMatrix<f64>) -> f64 {
    let scale = max_abs(x).max(1.0);
    max_abs(&(x - x.transpose())) / scale
}

/// Smallest eigenvalue of the symmetric part of `x`.
pub fn min_eigenvalue(x: &DMatrix<f64>) -> f64 {
    if x.is_empty() {
        return f64::INFINITY;
    }
    SymmetricEigen::new(symmetrize(x))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Solves `a · X = b` for symmetric positive definite `a`, falling back to LU.
pub fn solve_spd(a: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if let Some(chol) = a.clone().cholesky() {
        return Ok(chol.solve(b));
    }
    a.clone().lu().solve(b).ok_or_else(|| Error::Definiteness {
        what: what.to_string(),
        min_eigenvalue: min_eigenvalue(a),
    })
}

/// Solves `a · X = b` for a general square `a`.
pub fn solve(a: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::InvalidArgument(format!("{what} is singular")))
}

/// Numerical rank of a complex matrix: singular values above `tol · max(1, σ_max)`.
pub fn complex_rank(x: DMatrix<Complex<f64>>, tol: f64) -> usize {
    let sv = x.singular_values();
    let smax = sv.iter().copied().fold(0.0_f64, f64::max);
    let cut = tol * smax.max(1.0);
    sv.iter().filter(|&&s| s > cut).count()
}

/// Block matrix from a row-major grid of blocks with consistent shapes.
pub fn block(rows: &[&[&DMatrix<f64>]]) -> DMatrix<f64> {
    let heights: Vec<usize> = rows.iter().map(|r| r[0].nrows()).collect();
    let widths: Vec<usize> = rows[0].iter().map(|b| b.ncols()).collect();
    let mut out = DMatrix::zeros(heights.iter().sum(), widths.iter().sum());
    let mut r0 = 0;
    for (row, &h) in rows.iter().zip(&heights) {
        let mut c0 = 0;
        for (blk, &w) in row.iter().zip(&widths) {
            debug_assert_eq!((blk.nrows(), blk.ncols()), (h, w));
            out.view_mut((r0, c0), (h, w)).copy_from(*blk);
            c0 += w;
        }
        r0 += h;
    }
    out
}

/// Eigenvalues of a real square matrix (via the real Schur form).
pub fn eigenvalues(a: &DMatrix<f64>) -> Vec<Complex<f64>> {
    if a.is_empty() {
        return Vec::new();
    }
    a.complex_eigenvalues().iter().copied().collect()
}

pub fn identity(n: usize) -> DMatrix<f64> {
    DMatrix::identity(n, n)
}

pub fn zeros(r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::zeros(r, c)
}
