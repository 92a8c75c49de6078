//! Small symmetric-matrix helpers shared across the crate.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{invalid, Result};

/// Largest relative asymmetry `|A_ij - A_ji| / max(1, |A_ij|)`.
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let scale = a[(i, j)].abs().max(a[(j, i)].abs()).max(1.0);
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs() / scale);
        }
    }
    worst
}

/// Eigendecomposition of a symmetric matrix, symmetrized first to absorb
/// round-off in the off-diagonal pairs.
pub fn sym_eigen(a: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let sym = (a + a.transpose()) * 0.5;
    SymmetricEigen::new(sym)
}

/// Symmetric PSD square root with eigenvalues floored at `eigen_floor`
/// before the root is taken.
pub fn spd_sqrt_floored(a: &DMatrix<f64>, eigen_floor: f64) -> DMatrix<f64> {
    let eig = sym_eigen(a);
    let roots: DVector<f64> = eig.eigenvalues.map(|l| l.max(eigen_floor).sqrt());
    let q = &eig.eigenvectors;
    let mut out = DMatrix::zeros(a.nrows(), a.ncols());
    for k in 0..roots.len() {
        let col = q.column(k);
        // Rank-1 accumulation keeps the result exactly symmetric.
        out.ger(roots[k], &col, &col, 1.0);
    }
    out
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn eigen_range(a: &DMatrix<f64>) -> (f64, f64) {
    let eig = sym_eigen(a);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &l in eig.eigenvalues.iter() {
        lo = lo.min(l);
        hi = hi.max(l);
    }
    (lo, hi)
}

/// Lower Cholesky factor of an SPD matrix.
pub fn cholesky_lower(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (a + a.transpose()) * 0.5;
    match nalgebra::Cholesky::new(sym) {
        Some(c) => Ok(c.l()),
        None => invalid("matrix is not positive definite"),
    }
}
