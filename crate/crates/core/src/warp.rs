//! The semiparametric warping family: monotone interpolating Hermite splines
//! parameterized by landmark vectors, and the Jupp transform between
//! constrained landmark vectors and unconstrained coordinates.
//!
//! A warp maps `[a, b]` onto itself, fixes both endpoints and carries the
//! knot `tau0[j]` to the landmark `tau[j]`. Slopes at the interpolation nodes
//! are assigned by the Fritsch-Carlson construction so the spline is
//! guaranteed monotone.

use crate::basis::SplineBasis;
use crate::error::{Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Warping knots: the interval and the reference landmark vector `tau0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotVector {
    a: f64,
    b: f64,
    tau0: Vec<f64>,
}

/// Unconstrained (Jupp) coordinates of a landmark vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JuppCoords(pub Vec<f64>);

/// A strictly increasing piecewise-cubic Hermite map of `[a, b]` onto itself.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpFunction {
    /// Node abscissae: `a, tau0..., b`.
    xs: Vec<f64>,
    /// Node ordinates: `a, tau..., b`.
    ys: Vec<f64>,
    /// Fritsch-Carlson slopes at the nodes.
    slopes: Vec<f64>,
}

impl KnotVector {
    pub fn new(a: f64, b: f64, tau0: Vec<f64>) -> Result<Self> {
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(Error::invalid(format!("degenerate interval [{a}, {b}]")));
        }
        check_landmarks(&tau0, a, b)?;
        Ok(KnotVector { a, b, tau0 })
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.a, self.b)
    }

    pub fn tau0(&self) -> &[f64] {
        &self.tau0
    }

    /// Number of free landmarks `r`. Zero means the family contains only the
    /// identity warp.
    pub fn r(&self) -> usize {
        self.tau0.len()
    }

    /// Jupp coordinates of the reference landmarks.
    pub fn theta0(&self) -> JuppCoords {
        jupp_forward(&self.tau0, self.a, self.b).expect("tau0 validated on construction")
    }

    /// Warp carrying `tau0` to `tau`.
    pub fn warp_to(&self, tau: &[f64]) -> Result<WarpFunction> {
        if tau.len() != self.tau0.len() {
            return Err(Error::invalid(format!(
                "landmark count {} does not match knot count {}",
                tau.len(),
                self.tau0.len()
            )));
        }
        check_landmarks(tau, self.a, self.b)?;
        let mut xs = Vec::with_capacity(self.tau0.len() + 2);
        xs.push(self.a);
        xs.extend_from_slice(&self.tau0);
        xs.push(self.b);
        let mut ys = Vec::with_capacity(tau.len() + 2);
        ys.push(self.a);
        ys.extend_from_slice(tau);
        ys.push(self.b);
        let slopes = fc_slopes(&xs, &ys)?;
        Ok(WarpFunction { xs, ys, slopes })
    }

    /// Warp determined by unconstrained coordinates `theta`.
    pub fn warp_from_jupp(&self, theta: &[f64]) -> Result<WarpFunction> {
        let tau = jupp_inverse(theta, self.a, self.b);
        self.warp_to(&tau)
    }

    /// The identity warp of the family.
    pub fn identity_warp(&self) -> WarpFunction {
        self.warp_to(&self.tau0.clone()).expect("identity landmarks are valid")
    }
}

fn check_landmarks(tau: &[f64], a: f64, b: f64) -> Result<()> {
    let mut prev = a;
    for (j, &t) in tau.iter().enumerate() {
        if !t.is_finite() || t <= prev {
            return Err(Error::domain(format!(
                "landmark {j} ({t}) violates the ordering a < tau_1 < ... < tau_r < b"
            )));
        }
        prev = t;
    }
    if prev >= b {
        return Err(Error::domain(format!("last landmark {prev} is not below b = {b}")));
    }
    Ok(())
}

/// Jupp transform: `theta_k = log((tau_{k+1} - tau_k) / (tau_k - tau_{k-1}))`
/// with the conventions `tau_0 = a` and `tau_{r+1} = b`.
pub fn jupp_forward(tau: &[f64], a: f64, b: f64) -> Result<JuppCoords> {
    check_landmarks(tau, a, b)?;
    let r = tau.len();
    let mut theta = Vec::with_capacity(r);
    for k in 0..r {
        let lower = if k == 0 { a } else { tau[k - 1] };
        let upper = if k == r - 1 { b } else { tau[k + 1] };
        theta.push(((upper - tau[k]) / (tau[k] - lower)).ln());
    }
    Ok(JuppCoords(theta))
}

/// Inverse Jupp transform. Total on finite inputs.
///
/// Gaps are reconstructed from the cumulative log ratios in a
/// log-sum-exp-stable way, then floored at `1e-9 * (b - a)` so extreme
/// coordinates cannot produce numerically singular warps.
pub fn jupp_inverse(theta: &[f64], a: f64, b: f64) -> Vec<f64> {
    let r = theta.len();
    if r == 0 {
        return Vec::new();
    }
    // cum[k] = log(g_k / g_0) for gaps g_0..g_r.
    let mut cum = Vec::with_capacity(r + 1);
    cum.push(0.0);
    let mut acc = 0.0;
    for &t in theta {
        acc += t;
        cum.push(acc);
    }
    let max = cum.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut gaps: Vec<f64> = cum.iter().map(|&c| (c - max).exp()).collect();
    let total: f64 = gaps.iter().sum();
    let width = b - a;
    for g in &mut gaps {
        *g *= width / total;
    }
    // Floor tiny gaps and renormalize.
    let floor = 1e-9 * width;
    if gaps.iter().any(|&g| g < floor) {
        for g in &mut gaps {
            *g = g.max(floor);
        }
        let total: f64 = gaps.iter().sum();
        for g in &mut gaps {
            *g *= width / total;
        }
    }
    // Anchor each landmark to the endpoint with the smaller cumulative mass:
    // tiny gaps cluster toward an endpoint, and measuring from the near side
    // keeps the forward transform's gap reconstruction at full precision.
    let mut tau = Vec::with_capacity(r);
    for k in 1..=r {
        let before: f64 = gaps[..k].iter().sum();
        let after: f64 = gaps[k..].iter().sum();
        tau.push(if before <= after { a + before } else { b - after });
    }
    tau
}

/// Fritsch-Carlson slope assignment for monotone (nondecreasing) data.
///
/// Interior slopes are the secant means where both neighboring secants are
/// positive and zero otherwise; endpoint slopes are the one-sided secants
/// clamped to `[0, 3 * secant]`; each segment's slope pair is then projected
/// onto the circle `alpha^2 + beta^2 <= 9` of the monotonicity region.
pub fn fc_slopes(x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return Err(Error::invalid("need at least two nodes with matching ordinates"));
    }
    let mut secants = Vec::with_capacity(n - 1);
    for k in 0..n - 1 {
        let h = x[k + 1] - x[k];
        if h <= 0.0 {
            return Err(Error::domain("node abscissae must be strictly increasing"));
        }
        let d = (y[k + 1] - y[k]) / h;
        if d < 0.0 {
            return Err(Error::domain("ordinates must be monotone nondecreasing"));
        }
        secants.push(d);
    }

    let mut slopes = vec![0.0; n];
    slopes[0] = secants[0].clamp(0.0, 3.0 * secants[0]);
    slopes[n - 1] = secants[n - 2].clamp(0.0, 3.0 * secants[n - 2]);
    for k in 1..n - 1 {
        if secants[k - 1] > 0.0 && secants[k] > 0.0 {
            slopes[k] = 0.5 * (secants[k - 1] + secants[k]);
        }
    }
    // Flat segments force zero slopes at both ends.
    for k in 0..n - 1 {
        if secants[k] == 0.0 {
            slopes[k] = 0.0;
            slopes[k + 1] = 0.0;
        }
    }
    // Projection sweep; scaling only ever shrinks slopes, so earlier segments
    // remain inside the (star-shaped) monotonicity region.
    for k in 0..n - 1 {
        if secants[k] <= 0.0 {
            continue;
        }
        let alpha = slopes[k] / secants[k];
        let beta = slopes[k + 1] / secants[k];
        let norm2 = alpha * alpha + beta * beta;
        if norm2 > 9.0 {
            let f = 3.0 / norm2.sqrt();
            slopes[k] *= f;
            slopes[k + 1] *= f;
        }
    }
    Ok(slopes)
}

impl WarpFunction {
    pub fn interval(&self) -> (f64, f64) {
        (self.xs[0], *self.xs.last().unwrap())
    }

    /// Node abscissae `a, tau0..., b`.
    pub fn node_abscissae(&self) -> &[f64] {
        &self.xs
    }

    /// Node ordinates `a, tau..., b`.
    pub fn node_ordinates(&self) -> &[f64] {
        &self.ys
    }

    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }

    fn segment_of(&self, t: f64) -> usize {
        // Greatest k with xs[k] <= t, capped to the last segment.
        let n = self.xs.len();
        match self.xs.binary_search_by(|v| v.partial_cmp(&t).unwrap()) {
            Ok(k) => k.min(n - 2),
            Err(k) => k.saturating_sub(1).min(n - 2),
        }
    }

    fn hermite(&self, seg: usize, t: f64) -> f64 {
        let h = self.xs[seg + 1] - self.xs[seg];
        let u = (t - self.xs[seg]) / h;
        let u2 = u * u;
        let u3 = u2 * u;
        let h00 = 2.0 * u3 - 3.0 * u2 + 1.0;
        let h10 = u3 - 2.0 * u2 + u;
        let h01 = -2.0 * u3 + 3.0 * u2;
        let h11 = u3 - u2;
        self.ys[seg] * h00 + h * self.slopes[seg] * h10 + self.ys[seg + 1] * h01 + h * self.slopes[seg + 1] * h11
    }

    fn hermite_deriv(&self, seg: usize, t: f64) -> f64 {
        let h = self.xs[seg + 1] - self.xs[seg];
        let u = (t - self.xs[seg]) / h;
        let u2 = u * u;
        let dh00 = (6.0 * u2 - 6.0 * u) / h;
        let dh10 = 3.0 * u2 - 4.0 * u + 1.0;
        let dh01 = (-6.0 * u2 + 6.0 * u) / h;
        let dh11 = 3.0 * u2 - 2.0 * u;
        self.ys[seg] * dh00 + self.slopes[seg] * dh10 + self.ys[seg + 1] * dh01 + self.slopes[seg + 1] * dh11
    }

    /// Evaluate `w(t)`.
    pub fn eval(&self, t: f64) -> Result<f64> {
        let (a, b) = self.interval();
        if !(t >= a && t <= b) {
            return Err(Error::domain(format!("point {t} outside warp domain [{a}, {b}]")));
        }
        if t == a {
            return Ok(self.ys[0]);
        }
        if t == b {
            return Ok(*self.ys.last().unwrap());
        }
        Ok(self.hermite(self.segment_of(t), t))
    }

    /// Solve `w(t) = y` by per-segment bracketing plus safeguarded Newton
    /// with bisection fallback.
    pub fn invert(&self, y: f64) -> Result<f64> {
        let (a, b) = self.interval();
        let (ylo, yhi) = (self.ys[0], *self.ys.last().unwrap());
        if !(y >= ylo && y <= yhi) {
            return Err(Error::domain(format!("value {y} outside warp range [{ylo}, {yhi}]")));
        }
        // Landmarks invert exactly.
        for (k, &yk) in self.ys.iter().enumerate() {
            if y == yk {
                return Ok(self.xs[k]);
            }
        }
        let seg = match self.ys.binary_search_by(|v| v.partial_cmp(&y).unwrap()) {
            Ok(k) => k.min(self.ys.len() - 2),
            Err(k) => k.saturating_sub(1).min(self.ys.len() - 2),
        };
        let mut lo = self.xs[seg];
        let mut hi = self.xs[seg + 1];
        let tol = 1e-12 * (b - a);
        let mut t = 0.5 * (lo + hi);
        for _ in 0..100 {
            let f = self.hermite(seg, t) - y;
            if f.abs() <= tol {
                return Ok(t);
            }
            if f > 0.0 {
                hi = t;
            } else {
                lo = t;
            }
            let df = self.hermite_deriv(seg, t);
            let newton = if df > 0.0 { t - f / df } else { f64::NAN };
            t = if newton.is_finite() && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo <= tol {
                return Ok(t);
            }
        }
        Ok(t)
    }
}

/// Design matrix of the basis composed with the inverse warp: row `k` is
/// `b(w^{-1}(t_k))'`.
pub fn warped_basis_matrix(
    basis: &SplineBasis,
    warp: &WarpFunction,
    grid: &[f64],
) -> Result<DMatrix<f64>> {
    let s = basis.dimension();
    let mut out = DMatrix::zeros(grid.len(), s);
    let mut local = Vec::new();
    let (a, b) = basis.interval();
    for (k, &t) in grid.iter().enumerate() {
        let inv = warp.invert(t)?.clamp(a, b);
        let start = basis.eval_local(inv, &mut local)?;
        for (offset, &v) in local.iter().enumerate() {
            out[(k, start + offset)] = v;
        }
    }
    Ok(out)
}
