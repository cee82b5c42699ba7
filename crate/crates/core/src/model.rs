//! Data containers, the full parameter set, and the exact Gaussian
//! computations available conditional on warps: the marginal likelihood of a
//! group given its warping effects, and the conditional moments of the
//! amplitude scores.
//!
//! Conditional on the warping effects of group `i`, the stacked observation
//! vector is Gaussian with a covariance that couples subjects only through
//! the shared group score `u_i`. All computations below exploit that
//! structure: per-subject Woodbury factorizations in the (small) score
//! dimension `q`, then a rank-`p` correction for the shared scores.

use crate::basis::SplineBasis;
use crate::error::{Error, Result};
use crate::numeric::linalg::{cholesky_jittered, chol_logdet, sqrt_psd};
use crate::numeric::rng::stream;
use crate::warp::{warped_basis_matrix, KnotVector, WarpFunction};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const LN_2PI: f64 = 1.837_877_066_409_345_6;

/// Observations of one group, stored contiguously per subject with explicit
/// index offsets (subjects have irregular numbers of observations).
#[derive(Debug, Clone, PartialEq)]
pub struct GroupData {
    offsets: Vec<usize>,
    times: Vec<f64>,
    values: Vec<f64>,
}

impl GroupData {
    /// Build from per-subject `(times, values)` pairs. Times must be sorted
    /// strictly ascending within a subject and each subject needs at least
    /// one observation.
    pub fn from_subjects(subjects: &[(Vec<f64>, Vec<f64>)]) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::invalid("a group needs at least one subject"));
        }
        let mut offsets = Vec::with_capacity(subjects.len() + 1);
        offsets.push(0);
        let total: usize = subjects.iter().map(|(t, _)| t.len()).sum();
        let mut times = Vec::with_capacity(total);
        let mut values = Vec::with_capacity(total);
        for (j, (t, y)) in subjects.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::invalid(format!("subject {j} has no observations")));
            }
            if t.len() != y.len() {
                return Err(Error::invalid(format!("subject {j} has mismatched grid and values")));
            }
            for w in t.windows(2) {
                if !(w[0] < w[1]) {
                    return Err(Error::invalid(format!("subject {j} grid is not strictly ascending")));
                }
            }
            times.extend_from_slice(t);
            values.extend_from_slice(y);
            offsets.push(times.len());
        }
        Ok(GroupData { offsets, times, values })
    }

    pub fn n_subjects(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_obs(&self) -> usize {
        self.times.len()
    }

    pub fn n_obs_subject(&self, j: usize) -> usize {
        self.offsets[j + 1] - self.offsets[j]
    }

    /// Time grid and measurements of subject `j`.
    pub fn subject(&self, j: usize) -> (&[f64], &[f64]) {
        let (lo, hi) = (self.offsets[j], self.offsets[j + 1]);
        (&self.times[lo..hi], &self.values[lo..hi])
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Irregular longitudinal observations: `I` groups, each with its subjects.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    groups: Vec<GroupData>,
    interval: (f64, f64),
}

impl ObservationSet {
    pub fn new(groups: Vec<GroupData>, interval: (f64, f64)) -> Result<Self> {
        let (a, b) = interval;
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(Error::invalid(format!("degenerate interval [{a}, {b}]")));
        }
        if groups.is_empty() {
            return Err(Error::invalid("need at least one group"));
        }
        for (i, g) in groups.iter().enumerate() {
            for &t in g.times() {
                if !(t >= a && t <= b) {
                    return Err(Error::domain(format!(
                        "group {i} has a time point {t} outside [{a}, {b}]"
                    )));
                }
            }
        }
        Ok(ObservationSet { groups, interval })
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group(&self, i: usize) -> &GroupData {
        &self.groups[i]
    }

    pub fn groups(&self) -> &[GroupData] {
        &self.groups
    }

    pub fn interval(&self) -> (f64, f64) {
        self.interval
    }

    pub fn n_subjects_total(&self) -> usize {
        self.groups.iter().map(|g| g.n_subjects()).sum()
    }

    pub fn n_obs_total(&self) -> usize {
        self.groups.iter().map(|g| g.n_obs()).sum()
    }

    /// `Some(J)` when every group has the same number of subjects.
    pub fn balanced_subjects(&self) -> Option<usize> {
        let j = self.groups[0].n_subjects();
        if self.groups.iter().all(|g| g.n_subjects() == j) {
            Some(j)
        } else {
            None
        }
    }

    /// Smallest interval containing all observation times.
    pub fn data_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for g in &self.groups {
            for &t in g.times() {
                lo = lo.min(t);
                hi = hi.max(t);
            }
        }
        (lo, hi)
    }
}

/// Full parameter set of the warped functional ANOVA model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Amplitude spline basis.
    pub basis: SplineBasis,
    /// Warping knots (`tau0`); `r = 0` disables warping.
    pub knots: KnotVector,
    /// Mean coefficients: `mu(t) = b(t)' mean_coef`.
    pub mean_coef: DVector<f64>,
    /// Group-factor component coefficients (s x p, J-orthonormal columns).
    pub group_components: DMatrix<f64>,
    /// Residual-term component coefficients (s x q, J-orthonormal columns).
    pub subject_components: DMatrix<f64>,
    /// Score variances of the group components, descending.
    pub group_variances: DVector<f64>,
    /// Score variances of the subject components, descending.
    pub subject_variances: DVector<f64>,
    /// Between-group covariance of the warp coordinates (r x r).
    pub warp_group_cov: DMatrix<f64>,
    /// Within-group covariance of the warp coordinates (r x r).
    pub warp_subject_cov: DMatrix<f64>,
    /// Measurement noise variance.
    pub noise_var: f64,
}

impl ModelParams {
    pub fn p(&self) -> usize {
        self.group_components.ncols()
    }

    pub fn q(&self) -> usize {
        self.subject_components.ncols()
    }

    pub fn r(&self) -> usize {
        self.knots.r()
    }

    pub fn s(&self) -> usize {
        self.basis.dimension()
    }

    /// Mean function value at `t`.
    pub fn mean_value(&self, t: f64) -> Result<f64> {
        self.basis.spline_value(&self.mean_coef, t)
    }

    /// Check the structural invariants (orthonormality within 1e-8, ordered
    /// positive variances, symmetric PSD warp covariances, positive noise).
    pub fn validate(&self, gram: &crate::basis::GramMatrix) -> Result<()> {
        let s = self.s();
        if self.mean_coef.len() != s
            || self.group_components.nrows() != s
            || self.subject_components.nrows() != s
        {
            return Err(Error::invalid("coefficient dimensions do not match the basis"));
        }
        for (name, comp) in [("group", &self.group_components), ("subject", &self.subject_components)] {
            let k = comp.ncols();
            if k == 0 {
                continue;
            }
            let gramk = comp.transpose() * gram.matrix() * comp;
            let dev = (&gramk - DMatrix::identity(k, k)).abs().max();
            if dev > 1e-8 {
                return Err(Error::computation(format!(
                    "{name} components deviate from J-orthonormality by {dev:.3e}"
                )));
            }
        }
        for (name, v) in [("group", &self.group_variances), ("subject", &self.subject_variances)] {
            for w in v.as_slice().windows(2) {
                if w[0] < w[1] {
                    return Err(Error::invalid(format!("{name} variances are not descending")));
                }
            }
            if v.iter().any(|&x| x <= 0.0) {
                return Err(Error::invalid(format!("{name} variances must be positive")));
            }
        }
        let r = self.r();
        if self.warp_group_cov.nrows() != r || self.warp_subject_cov.nrows() != r {
            return Err(Error::invalid("warp covariance dimensions do not match the knot count"));
        }
        for (name, m) in [("between-group", &self.warp_group_cov), ("within-group", &self.warp_subject_cov)] {
            if r == 0 {
                continue;
            }
            let (vals, _) = crate::numeric::linalg::sym_eigen_desc(m);
            if vals[r - 1] < 1e-10 - 1e-15 {
                return Err(Error::invalid(format!(
                    "{name} warp covariance has eigenvalue {} below the 1e-10 floor",
                    vals[r - 1]
                )));
            }
        }
        if self.noise_var < 1e-12 {
            return Err(Error::invalid("noise variance below the 1e-12 floor"));
        }
        Ok(())
    }
}

/// Warping random effects of one group: the group effect and one per-subject
/// effect, all on the unconstrained Jupp scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpEffects {
    /// Group-level effect (length r).
    pub group: Vec<f64>,
    /// Per-subject effects (each length r).
    pub subjects: Vec<Vec<f64>>,
}

impl WarpEffects {
    /// All-zero effects (identity warps when combined with `theta0`).
    pub fn zero(r: usize, n_subjects: usize) -> Self {
        WarpEffects { group: vec![0.0; r], subjects: vec![vec![0.0; r]; n_subjects] }
    }

    /// Unconstrained coordinates of subject `j`: `theta0 + eta + xi_j`.
    pub fn theta_for_subject(&self, theta0: &[f64], j: usize) -> Vec<f64> {
        theta0
            .iter()
            .zip(&self.group)
            .zip(&self.subjects[j])
            .map(|((&t0, &e), &x)| t0 + e + x)
            .collect()
    }
}

/// Amplitude scores of one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeScores {
    /// Group scores `u_i` (length p).
    pub group: DVector<f64>,
    /// Per-subject scores `v_ij` (each length q).
    pub subjects: Vec<DVector<f64>>,
}

/// Warp functions for each subject of a group implied by `theta0` and the
/// warping effects. `None` marks the exact identity (r = 0 fast path).
pub(crate) fn subject_warps(
    params: &ModelParams,
    n_subjects: usize,
    warps: &WarpEffects,
) -> Result<Vec<Option<WarpFunction>>> {
    if params.r() == 0 {
        return Ok(vec![None; n_subjects]);
    }
    let theta0 = params.knots.theta0();
    (0..n_subjects)
        .map(|j| {
            let theta = warps.theta_for_subject(&theta0.0, j);
            params.knots.warp_from_jupp(&theta).map(Some)
        })
        .collect()
}

/// Warped design matrix of one subject.
pub(crate) fn subject_design(
    params: &ModelParams,
    times: &[f64],
    warp: &Option<WarpFunction>,
) -> Result<DMatrix<f64>> {
    match warp {
        None => params.basis.eval_matrix(times),
        Some(w) => warped_basis_matrix(&params.basis, w, times),
    }
}

/// Per-subject sufficient pieces of the group likelihood given warps.
///
/// With `W = sigma^2 I + X Lambda X'` (X the warped subject design times the
/// residual components), these are the constant, the information `Phi'W^-1
/// Phi` and the lean `Phi'W^-1 r` needed to marginalize the shared scores,
/// plus the small matrices needed for conditional moments of `v`.
#[derive(Debug, Clone)]
pub(crate) struct SubjectStats {
    pub loglik_const: f64,
    pub info: DMatrix<f64>,
    pub lean: DVector<f64>,
    /// Conditional covariance of `v` given `(y, u)`.
    pub v_cov_given_u: DMatrix<f64>,
    /// `E[v | y, u] = v_lean - v_slope * u`.
    pub v_lean: DVector<f64>,
    pub v_slope: DMatrix<f64>,
}

pub(crate) fn subject_stats(
    params: &ModelParams,
    design: &DMatrix<f64>,
    values: &[f64],
) -> Result<SubjectStats> {
    let p = params.p();
    let q = params.q();
    let sigma2 = params.noise_var;
    let nu = values.len();

    let y = DVector::from_column_slice(values);
    let resid = &y - design * &params.mean_coef;
    let phi = design * &params.group_components; // nu x p
    let rr: f64 = resid.dot(&resid);
    let phi_t_r = phi.transpose() * &resid; // p
    let phi_t_phi = phi.transpose() * &phi; // p x p

    if q == 0 {
        let loglik_const =
            -0.5 * (nu as f64) * (LN_2PI + sigma2.ln()) - 0.5 * rr / sigma2;
        return Ok(SubjectStats {
            loglik_const,
            info: phi_t_phi / sigma2,
            lean: phi_t_r / sigma2,
            v_cov_given_u: DMatrix::zeros(0, 0),
            v_lean: DVector::zeros(0),
            v_slope: DMatrix::zeros(0, p),
        });
    }

    let x = design * &params.subject_components; // nu x q
    let xt_r = x.transpose() * &resid; // q
    let xt_phi = x.transpose() * &phi; // q x p
    let xt_x = x.transpose() * &x; // q x q

    // K = Lambda^-1 + X'X / sigma^2 is the conditional precision of v.
    let mut k = &xt_x / sigma2;
    for i in 0..q {
        k[(i, i)] += 1.0 / params.subject_variances[i];
    }
    let chol_k = cholesky_jittered(&k).map_err(|e| {
        Error::computation(format!("subject covariance factorization failed: {e}"))
    })?;
    // logdet W = nu log sigma^2 + logdet(Lambda K).
    let logdet_w = (nu as f64) * sigma2.ln()
        + chol_logdet(&chol_k)
        + params.subject_variances.iter().map(|v| v.ln()).sum::<f64>();

    let k_inv_xt_r = chol_k.solve(&xt_r);
    let k_inv_xt_phi = chol_k.solve(&xt_phi);

    let quad_r = rr / sigma2 - xt_r.dot(&k_inv_xt_r) / (sigma2 * sigma2);
    let lean = (phi_t_r - xt_phi.transpose() * &k_inv_xt_r / sigma2) / sigma2;
    let info = (phi_t_phi - xt_phi.transpose() * &k_inv_xt_phi / sigma2) / sigma2;

    let loglik_const = -0.5 * (nu as f64) * LN_2PI - 0.5 * logdet_w - 0.5 * quad_r;

    Ok(SubjectStats {
        loglik_const,
        info,
        lean,
        v_cov_given_u: chol_k.inverse(),
        v_lean: k_inv_xt_r / sigma2,
        v_slope: k_inv_xt_phi / sigma2,
    })
}

/// Group-level likelihood and conditional-moment assembly from per-subject
/// stats. `A = Gamma^-1 + sum info_j` and `h = sum lean_j`.
#[derive(Debug, Clone)]
pub(crate) struct GroupStats {
    pub loglik: f64,
    pub u_mean: DVector<f64>,
    pub u_cov: DMatrix<f64>,
}

pub(crate) fn assemble_group(
    params: &ModelParams,
    consts: f64,
    info_sum: &DMatrix<f64>,
    lean_sum: &DVector<f64>,
) -> Result<GroupStats> {
    let p = params.p();
    if p == 0 {
        return Ok(GroupStats {
            loglik: consts,
            u_mean: DVector::zeros(0),
            u_cov: DMatrix::zeros(0, 0),
        });
    }
    let mut a = info_sum.clone();
    for i in 0..p {
        a[(i, i)] += 1.0 / params.group_variances[i];
    }
    let chol_a = cholesky_jittered(&a)
        .map_err(|e| Error::computation(format!("group score precision singular: {e}")))?;
    let u_mean = chol_a.solve(lean_sum);
    let quad = lean_sum.dot(&u_mean);
    let logdet_term = chol_logdet(&chol_a)
        + params.group_variances.iter().map(|v| v.ln()).sum::<f64>();
    let loglik = consts - 0.5 * logdet_term + 0.5 * quad;
    Ok(GroupStats { loglik, u_mean, u_cov: chol_a.inverse() })
}

/// Log marginal density of a group's stacked observations given its warping
/// effects, with the amplitude scores integrated out analytically.
pub fn group_loglik_given_warps(
    params: &ModelParams,
    group: &GroupData,
    warps: &WarpEffects,
) -> Result<f64> {
    let warp_fns = subject_warps(params, group.n_subjects(), warps)?;
    let p = params.p();
    let mut consts = 0.0;
    let mut info_sum = DMatrix::zeros(p, p);
    let mut lean_sum = DVector::zeros(p);
    for j in 0..group.n_subjects() {
        let (times, values) = group.subject(j);
        let design = subject_design(params, times, &warp_fns[j])?;
        let stats = subject_stats(params, &design, values)?;
        consts += stats.loglik_const;
        info_sum += &stats.info;
        lean_sum += &stats.lean;
    }
    let group_stats = assemble_group(params, consts, &info_sum, &lean_sum)?;
    if !group_stats.loglik.is_finite() {
        return Err(Error::computation("non-finite group log-likelihood"));
    }
    Ok(group_stats.loglik)
}

/// Exact Gaussian conditional moments of the amplitude scores
/// `(u_i, v_i1, ..., v_iJ)` given the group's observations and its warping
/// effects.
#[derive(Debug, Clone)]
pub struct AmplitudeMoments {
    pub u_mean: DVector<f64>,
    pub u_cov: DMatrix<f64>,
    pub subjects: Vec<SubjectMoments>,
    /// Group log-likelihood given the warps (free by-product).
    pub loglik: f64,
}

#[derive(Debug, Clone)]
pub struct SubjectMoments {
    pub v_mean: DVector<f64>,
    pub v_cov: DMatrix<f64>,
    /// Cross-covariance `cov(u, v_j | y, warps)` (p x q).
    pub uv_cov: DMatrix<f64>,
}

impl AmplitudeMoments {
    /// `E[u u' | y, warps]`.
    pub fn u_second_moment(&self) -> DMatrix<f64> {
        &self.u_cov + &self.u_mean * self.u_mean.transpose()
    }

    /// `E[v_j v_j' | y, warps]`.
    pub fn v_second_moment(&self, j: usize) -> DMatrix<f64> {
        let s = &self.subjects[j];
        &s.v_cov + &s.v_mean * s.v_mean.transpose()
    }

    /// `E[u v_j' | y, warps]`.
    pub fn uv_moment(&self, j: usize) -> DMatrix<f64> {
        let s = &self.subjects[j];
        &s.uv_cov + &self.u_mean * s.v_mean.transpose()
    }
}

pub fn amplitude_conditional_moments(
    params: &ModelParams,
    group: &GroupData,
    warps: &WarpEffects,
) -> Result<AmplitudeMoments> {
    let warp_fns = subject_warps(params, group.n_subjects(), warps)?;
    let p = params.p();
    let mut consts = 0.0;
    let mut info_sum = DMatrix::zeros(p, p);
    let mut lean_sum = DVector::zeros(p);
    let mut per_subject = Vec::with_capacity(group.n_subjects());
    for j in 0..group.n_subjects() {
        let (times, values) = group.subject(j);
        let design = subject_design(params, times, &warp_fns[j])?;
        let stats = subject_stats(params, &design, values)?;
        consts += stats.loglik_const;
        info_sum += &stats.info;
        lean_sum += &stats.lean;
        per_subject.push(stats);
    }
    let group_stats = assemble_group(params, consts, &info_sum, &lean_sum)?;
    let subjects = per_subject
        .iter()
        .map(|st| {
            let v_mean = &st.v_lean - &st.v_slope * &group_stats.u_mean;
            let v_cov = &st.v_cov_given_u + &st.v_slope * &group_stats.u_cov * st.v_slope.transpose();
            let uv_cov = -(&group_stats.u_cov * st.v_slope.transpose());
            SubjectMoments { v_mean, v_cov, uv_cov }
        })
        .collect();
    Ok(AmplitudeMoments {
        u_mean: group_stats.u_mean,
        u_cov: group_stats.u_cov,
        subjects,
        loglik: group_stats.loglik,
    })
}

/// Sampling design for the generative model: a balanced layout on a common
/// grid.
#[derive(Debug, Clone)]
pub struct SimulationDesign {
    pub n_groups: usize,
    pub subjects_per_group: usize,
    pub grid: Vec<f64>,
}

/// Latent variables drawn while simulating, for oracle checks.
#[derive(Debug, Clone)]
pub struct TrueEffects {
    pub warps: Vec<WarpEffects>,
    pub scores: Vec<AmplitudeScores>,
}

/// Draw one dataset exactly from the model hierarchy. Deterministic given
/// the seed; each group has its own derived RNG stream.
pub fn simulate_from_model(
    params: &ModelParams,
    design: &SimulationDesign,
    seed: u64,
) -> Result<(ObservationSet, TrueEffects)> {
    let (a, b) = params.basis.interval();
    for &t in &design.grid {
        if !(t >= a && t <= b) {
            return Err(Error::domain(format!("grid point {t} outside [{a}, {b}]")));
        }
    }
    let r = params.r();
    let root_group = if r > 0 { Some(sqrt_psd(&params.warp_group_cov)?) } else { None };
    let root_subject = if r > 0 { Some(sqrt_psd(&params.warp_subject_cov)?) } else { None };

    let mut groups = Vec::with_capacity(design.n_groups);
    let mut all_warps = Vec::with_capacity(design.n_groups);
    let mut all_scores = Vec::with_capacity(design.n_groups);

    for i in 0..design.n_groups {
        let mut rng = stream(seed, &[0x5157, i as u64]);
        let eta = match &root_group {
            Some(root) => mvn_zero_mean(root, &mut rng),
            None => vec![],
        };
        let u = DVector::from_fn(params.p(), |k, _| {
            params.group_variances[k].sqrt() * standard_normal(&mut rng)
        });

        let mut subjects = Vec::with_capacity(design.subjects_per_group);
        let mut xi_all = Vec::with_capacity(design.subjects_per_group);
        let mut v_all = Vec::with_capacity(design.subjects_per_group);
        for _ in 0..design.subjects_per_group {
            let xi = match &root_subject {
                Some(root) => mvn_zero_mean(root, &mut rng),
                None => vec![],
            };
            let v = DVector::from_fn(params.q(), |k, _| {
                params.subject_variances[k].sqrt() * standard_normal(&mut rng)
            });
            xi_all.push(xi);
            v_all.push(v);
            subjects.push((design.grid.clone(), Vec::new()));
        }
        let warps = WarpEffects { group: eta, subjects: xi_all };
        let warp_fns = subject_warps(params, design.subjects_per_group, &warps)?;

        // Amplitude coefficients per subject: m + C u + D v.
        for (j, subject) in subjects.iter_mut().enumerate() {
            let coef = &params.mean_coef
                + &params.group_components * &u
                + &params.subject_components * &v_all[j];
            let mut vals = Vec::with_capacity(design.grid.len());
            for &t in &design.grid {
                let point = match &warp_fns[j] {
                    None => t,
                    Some(w) => w.invert(t)?.clamp(a, b),
                };
                let noiseless = params.basis.spline_value(&coef, point)?;
                vals.push(noiseless + params.noise_var.sqrt() * standard_normal(&mut rng));
            }
            subject.1 = vals;
        }

        groups.push(GroupData::from_subjects(&subjects)?);
        all_warps.push(warps);
        all_scores.push(AmplitudeScores { group: u, subjects: v_all });
    }

    let data = ObservationSet::new(groups, params.basis.interval())?;
    Ok((data, TrueEffects { warps: all_warps, scores: all_scores }))
}

/// Standard normal via Box-Muller on the ChaCha stream (keeps the draw count
/// per variate fixed, which makes sequences easy to reason about).
pub(crate) fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn mvn_zero_mean(cov_root: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let r = cov_root.nrows();
    let z = DVector::from_fn(r, |_, _| standard_normal(rng));
    (cov_root * z).iter().cloned().collect()
}
