//! B-spline amplitude basis: construction, evaluation, Gram matrix and
//! Gram-metric orthonormalization.
//!
//! The mean and the amplitude components of the model are spline functions
//! `f(t) = b(t)' coef` over a clamped B-spline basis `b` on `[a, b]`. The Gram
//! matrix `J` of pairwise L2 inner products defines the metric in which the
//! component coefficient matrices are kept orthonormal.

use crate::error::{Error, Result};
use crate::numeric::linalg::{sqrt_psd, sym_eigen_desc, symmetrize};
use crate::numeric::quadrature::gauss_legendre_on;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// A clamped B-spline basis on an interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    degree: usize,
    interval: (f64, f64),
    interior_knots: Vec<f64>,
    /// Full clamped knot vector: `degree + 1` copies of each endpoint around
    /// the interior knots.
    knots: Vec<f64>,
}

/// Gram matrix `J` of the basis: `J[k][l] = integral of b_k(t) b_l(t) dt`.
///
/// Symmetric positive definite and banded with bandwidth at most `degree`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramMatrix {
    matrix: DMatrix<f64>,
    degree: usize,
}

impl SplineBasis {
    /// Build a basis from explicit interior knots.
    ///
    /// The interior knots must be strictly increasing and strictly inside the
    /// interval. Degree 0 (piecewise constant) is accepted here for internal
    /// and testing use; [`SplineBasis::with_equispaced_knots`] is the
    /// user-facing constructor and requires degree >= 1.
    pub fn new(degree: usize, interior_knots: Vec<f64>, interval: (f64, f64)) -> Result<Self> {
        let (a, b) = interval;
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(Error::invalid(format!("degenerate interval [{a}, {b}]")));
        }
        for w in interior_knots.windows(2) {
            if !(w[0] < w[1]) {
                return Err(Error::invalid("interior knots must be strictly increasing"));
            }
        }
        if let (Some(&first), Some(&last)) = (interior_knots.first(), interior_knots.last()) {
            if !(first > a && last < b) {
                return Err(Error::invalid("interior knots must lie strictly inside the interval"));
            }
        }
        let mut knots = Vec::with_capacity(2 * (degree + 1) + interior_knots.len());
        knots.extend(std::iter::repeat_n(a, degree + 1));
        knots.extend_from_slice(&interior_knots);
        knots.extend(std::iter::repeat_n(b, degree + 1));
        Ok(SplineBasis { degree, interval, interior_knots, knots })
    }

    /// Basis of the given degree with `n_interior_knots` equispaced interior
    /// knots. Dimension is `n_interior_knots + degree + 1`.
    pub fn with_equispaced_knots(
        degree: usize,
        n_interior_knots: usize,
        interval: (f64, f64),
    ) -> Result<Self> {
        if degree < 1 {
            return Err(Error::invalid(format!("spline degree must be at least 1, got {degree}")));
        }
        let (a, b) = interval;
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(Error::invalid(format!("degenerate interval [{a}, {b}]")));
        }
        let h = (b - a) / (n_interior_knots as f64 + 1.0);
        let interior = (1..=n_interior_knots).map(|i| a + h * i as f64).collect();
        SplineBasis::new(degree, interior, interval)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn interval(&self) -> (f64, f64) {
        self.interval
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.interior_knots
    }

    /// Number of basis functions `s`.
    pub fn dimension(&self) -> usize {
        self.interior_knots.len() + self.degree + 1
    }

    /// Index of the knot span containing `t` (the right endpoint maps to the
    /// last nonempty span).
    fn find_span(&self, t: f64) -> usize {
        let s = self.dimension();
        let d = self.degree;
        if t >= self.knots[s] {
            return s - 1;
        }
        // Binary search over spans [d, s-1].
        let mut lo = d;
        let mut hi = s - 1;
        while lo < hi {
            let mid = (lo + hi).div_ceil(2);
            if self.knots[mid] <= t {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        lo
    }

    /// Evaluate the `degree + 1` basis functions that are nonzero at `t`.
    ///
    /// Writes the values into `values` (resized to `degree + 1`) and returns
    /// the index of the first nonzero basis function.
    pub fn eval_local(&self, t: f64, values: &mut Vec<f64>) -> Result<usize> {
        let (a, b) = self.interval;
        if !(t >= a && t <= b) {
            return Err(Error::domain(format!("point {t} outside basis interval [{a}, {b}]")));
        }
        let d = self.degree;
        values.clear();
        values.resize(d + 1, 0.0);
        let span = self.find_span(t);
        // Cox-de Boor triangular scheme over the nonzero window.
        values[0] = 1.0;
        let mut left = vec![0.0; d + 1];
        let mut right = vec![0.0; d + 1];
        for j in 1..=d {
            left[j] = t - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = values[r] / (right[r + 1] + left[j - r]);
                values[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            values[j] = saved;
        }
        Ok(span - d)
    }

    /// Evaluate the full basis row `b(t)'` as a dense vector of length `s`.
    pub fn eval_row(&self, t: f64) -> Result<DVector<f64>> {
        let mut local = Vec::new();
        let start = self.eval_local(t, &mut local)?;
        let mut row = DVector::zeros(self.dimension());
        for (offset, &v) in local.iter().enumerate() {
            row[start + offset] = v;
        }
        Ok(row)
    }

    /// Evaluate the basis at each point, producing the `len(points) x s`
    /// design matrix with rows `b(t_k)'`.
    pub fn eval_matrix(&self, points: &[f64]) -> Result<DMatrix<f64>> {
        let s = self.dimension();
        let mut out = DMatrix::zeros(points.len(), s);
        let mut local = Vec::new();
        for (k, &t) in points.iter().enumerate() {
            let start = self.eval_local(t, &mut local)?;
            for (offset, &v) in local.iter().enumerate() {
                out[(k, start + offset)] = v;
            }
        }
        Ok(out)
    }

    /// Value of the spline with the given coefficients at `t`.
    pub fn spline_value(&self, coefs: &DVector<f64>, t: f64) -> Result<f64> {
        let mut local = Vec::new();
        let start = self.eval_local(t, &mut local)?;
        Ok(local.iter().enumerate().map(|(o, &v)| v * coefs[start + o]).sum())
    }

    /// Gram matrix of pairwise L2 inner products, integrated exactly.
    ///
    /// The product of two degree-d pieces is a degree-2d polynomial on each
    /// knot span, so a per-span Gauss-Legendre rule with `degree + 2` nodes
    /// is exact.
    pub fn gram(&self) -> GramMatrix {
        let s = self.dimension();
        let d = self.degree;
        let mut gram = DMatrix::zeros(s, s);
        let mut local = Vec::new();
        // Nonempty spans run from knots[d..=s].
        for span in d..s {
            let (lo, hi) = (self.knots[span], self.knots[span + 1]);
            if hi <= lo {
                continue;
            }
            let (nodes, weights) = gauss_legendre_on(d + 2, lo, hi);
            for (&x, &w) in nodes.iter().zip(&weights) {
                let start = self
                    .eval_local(x, &mut local)
                    .expect("quadrature node inside interval");
                for i in 0..local.len() {
                    for j in 0..local.len() {
                        gram[(start + i, start + j)] += w * local[i] * local[j];
                    }
                }
            }
        }
        symmetrize(&mut gram);
        GramMatrix { matrix: gram, degree: d }
    }
}

impl GramMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dimension(&self) -> usize {
        self.matrix.nrows()
    }

    /// Bandwidth bound: entries vanish beyond `degree` off the diagonal.
    pub fn bandwidth(&self) -> usize {
        self.degree
    }

    /// Squared L2 norm of the spline with coefficient vector `coefs`.
    pub fn norm_sq(&self, coefs: &DVector<f64>) -> f64 {
        (coefs.transpose() * &self.matrix * coefs)[(0, 0)]
    }

    /// L2 inner product of two splines given by their coefficients.
    pub fn inner(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (a.transpose() * &self.matrix * b)[(0, 0)]
    }
}

/// Rotate a coefficient matrix and a score covariance into the J-orthonormal,
/// diagonal-variance parameterization.
///
/// Given `a` (s x k columns spanning the component space) and a symmetric PSD
/// score covariance `w` (k x k), returns `(a_orth, variances)` such that
/// `a_orth' J a_orth = I`, `variances` is descending and nonnegative, and the
/// coefficient-space covariance is preserved:
/// `a_orth * diag(variances) * a_orth' = a * w * a'`.
///
/// Sign convention: the largest-magnitude entry of each output column is
/// positive.
pub fn gram_orthonormalize(
    a: &DMatrix<f64>,
    w: &DMatrix<f64>,
    gram: &GramMatrix,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let s = a.nrows();
    let k = a.ncols();
    if k > s {
        return Err(Error::invalid(format!(
            "requested {k} components from a basis of dimension {s}"
        )));
    }
    if w.nrows() != k || w.ncols() != k {
        return Err(Error::invalid("score covariance must be k x k"));
    }
    if gram.dimension() != s {
        return Err(Error::invalid("Gram matrix dimension does not match coefficients"));
    }
    if k == 0 {
        return Ok((DMatrix::zeros(s, 0), DVector::zeros(0)));
    }

    let mut cov = a * w * a.transpose();
    symmetrize(&mut cov);

    let root = sqrt_psd(gram.matrix())?;
    let root_inv = crate::numeric::linalg::inv_spd(&root)?;

    let mut whitened = &root * &cov * &root;
    symmetrize(&mut whitened);
    let (vals, vecs) = sym_eigen_desc(&whitened);

    let mut out = DMatrix::zeros(s, k);
    let mut variances = DVector::zeros(k);
    for j in 0..k {
        let col = &root_inv * vecs.column(j);
        out.set_column(j, &col);
        variances[j] = vals[j].max(0.0);
    }

    // Fix signs: largest-magnitude entry of each column positive.
    for j in 0..k {
        let mut idx = 0;
        let mut best = 0.0;
        for i in 0..s {
            if out[(i, j)].abs() > best {
                best = out[(i, j)].abs();
                idx = i;
            }
        }
        if out[(idx, j)] < 0.0 {
            for i in 0..s {
                out[(i, j)] = -out[(i, j)];
            }
        }
    }
    Ok((out, variances))
}
