//! Dense symmetric linear-algebra helpers used throughout the crate.

use crate::error::{Error, Result};
use nalgebra::{Cholesky, DMatrix, DVector};

/// Symmetric eigendecomposition with eigenvalues sorted descending and the
/// eigenvector columns permuted to match.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let eig = m.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let vals = DVector::from_fn(n, |i, _| eig.eigenvalues[order[i]]);
    let vecs = DMatrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    (vals, vecs)
}

/// Symmetrize in place: (M + M^T) / 2.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Project a symmetric matrix onto the PSD cone by clipping negative
/// eigenvalues at `floor`. Returns the repaired matrix and whether any
/// eigenvalue was clipped.
pub fn psd_clip(m: &DMatrix<f64>, floor: f64) -> (DMatrix<f64>, bool) {
    let (vals, vecs) = sym_eigen_desc(m);
    let clipped = vals.iter().any(|&v| v < floor);
    if !clipped {
        return (m.clone(), false);
    }
    let fixed = DVector::from_fn(vals.len(), |i, _| vals[i].max(floor));
    let mut out = &vecs * DMatrix::from_diagonal(&fixed) * vecs.transpose();
    symmetrize(&mut out);
    (out, true)
}

/// Symmetric positive-definite square root via eigendecomposition.
pub fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (vals, vecs) = sym_eigen_desc(m);
    if vals.iter().any(|&v| v < -1e-10 * vals[0].abs().max(1.0)) {
        return Err(Error::computation("matrix is not positive semidefinite"));
    }
    let root = DVector::from_fn(vals.len(), |i, _| vals[i].max(0.0).sqrt());
    let mut out = &vecs * DMatrix::from_diagonal(&root) * vecs.transpose();
    symmetrize(&mut out);
    Ok(out)
}

/// Cholesky factorization with escalating diagonal jitter (1e-10 up to 1e-6
/// relative to the mean diagonal) when the plain factorization fails.
pub fn cholesky_jittered(m: &DMatrix<f64>) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    if let Some(chol) = Cholesky::new(m.clone()) {
        return Ok(chol);
    }
    let scale = m.diagonal().iter().map(|d| d.abs()).sum::<f64>() / m.nrows().max(1) as f64;
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let mut jitter = 1e-10;
    while jitter <= 1e-6 {
        let mut jm = m.clone();
        for i in 0..m.nrows() {
            jm[(i, i)] += jitter * scale;
        }
        if let Some(chol) = Cholesky::new(jm) {
            return Ok(chol);
        }
        jitter *= 100.0;
    }
    Err(Error::computation(format!(
        "Cholesky failed even with jitter (n={}, mean diag={:.3e})",
        m.nrows(),
        scale
    )))
}

/// Log-determinant from a Cholesky factor.
pub fn chol_logdet(chol: &Cholesky<f64, nalgebra::Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Solve the symmetric positive-definite system M x = b with jitter fallback.
pub fn solve_spd(m: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(cholesky_jittered(m)?.solve(b))
}

/// Inverse of a symmetric positive-definite matrix with jitter fallback.
pub fn inv_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(cholesky_jittered(m)?.inverse())
}

/// Condition number estimate (ratio of extreme eigenvalue magnitudes).
pub fn sym_condition(m: &DMatrix<f64>) -> f64 {
    let (vals, _) = sym_eigen_desc(m);
    let max = vals.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let min = vals.iter().fold(f64::INFINITY, |a, &v| a.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}
