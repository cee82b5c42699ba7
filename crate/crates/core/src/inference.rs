//! Asymptotic inference on the variance ratios: score vectors, empirical
//! Fisher information for the variance parameters, delta-method asymptotic
//! variances, arcsine-square-root confidence intervals, the classical
//! one-way F test on predicted effects, and a group bootstrap.
//!
//! The information matrices follow the moment-substitution form (expectations
//! of products of per-group posterior quantities replaced by empirical
//! averages over groups). They are evaluated at the moment-implied variance
//! parameters - the values the M-step fixed point assigns, i.e. averaged
//! posterior second moments - which makes the moment form and the score
//! outer-product estimate agree identically.

use crate::error::{Error, Result};
use crate::estimation::{fit_warped_anova, FitConfig, FitResult};
use crate::model::{GroupData, ObservationSet};
use crate::numeric::linalg::{sym_condition, sym_eigen_desc, symmetrize};
use crate::numeric::rng::stream;
use crate::numeric::special::{f_tail, normal_quantile};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const BOOT_TAG: u64 = 0xB007;

/// Proportion of amplitude variability explained by the main factor:
/// `sum(gamma) / (sum(gamma) + sum(lambda))`.
pub fn variance_ratio_amplitude(gamma: &DVector<f64>, lambda: &DVector<f64>) -> Result<f64> {
    ratio(gamma.iter().sum(), lambda.iter().sum())
}

/// Proportion of warping variability explained by the main factor:
/// `tr(Sigma) / tr(Sigma + Omega)`.
pub fn variance_ratio_warping(sigma: &DMatrix<f64>, omega: &DMatrix<f64>) -> Result<f64> {
    ratio(sigma.trace(), omega.trace())
}

fn ratio(main: f64, residual: f64) -> Result<f64> {
    if main < 0.0 || residual < 0.0 {
        return Err(Error::invalid("variance components must be nonnegative"));
    }
    let total = main + residual;
    if total == 0.0 {
        return Err(Error::invalid("all variance components are zero"));
    }
    Ok(main / total)
}

/// Variance parameters implied by the posterior summaries (the M-step fixed
/// point), together with per-group subject counts.
struct MomentImplied {
    gamma: DVector<f64>,
    lambda: DVector<f64>,
    sigma: DMatrix<f64>,
    omega: DMatrix<f64>,
    /// Subjects per group.
    j_counts: Vec<f64>,
    warnings: Vec<String>,
}

fn moment_implied(fit: &FitResult) -> Result<MomentImplied> {
    let p = fit.params.p();
    let q = fit.params.q();
    let r = fit.params.r();
    let groups = &fit.posterior.groups;
    let n_groups = groups.len() as f64;
    if groups.is_empty() {
        return Err(Error::invalid("fit contains no posterior summaries"));
    }
    let j_counts: Vec<f64> = groups.iter().map(|g| g.vv.len().max(g.xi2.len()) as f64).collect();
    let mut warnings = Vec::new();
    let j0 = j_counts[0];
    if j_counts.iter().any(|&j| (j - j0).abs() > 0.0) {
        warnings.push(
            "unbalanced design: the asymptotic theory assumes equal group sizes; using per-group counts"
                .to_string(),
        );
    }
    let n_subjects: f64 = j_counts.iter().sum();

    let mut gamma = DVector::zeros(p);
    for g in groups {
        for k in 0..p {
            gamma[k] += g.uu[(k, k)] / n_groups;
        }
    }
    let mut lambda = DVector::zeros(q);
    for g in groups {
        for vv in &g.vv {
            for k in 0..q {
                lambda[k] += vv[(k, k)] / n_subjects;
            }
        }
    }
    let mut sigma = DMatrix::zeros(r, r);
    let mut omega = DMatrix::zeros(r, r);
    for g in groups {
        sigma += &g.eta2 / n_groups;
        for xi2 in &g.xi2 {
            omega += xi2 / n_subjects;
        }
    }
    if gamma.iter().any(|&v| v <= 0.0) || lambda.iter().any(|&v| v <= 0.0) {
        return Err(Error::invalid("zero amplitude variances; scores carry no information"));
    }
    Ok(MomentImplied { gamma, lambda, sigma, omega, j_counts, warnings })
}

/// Score of one group's log marginal density with respect to a group score
/// variance, given the posterior second moment `u2 = E[u_k^2 | y]`.
pub fn score_gamma(gamma_k: f64, u2: f64) -> f64 {
    -0.5 / gamma_k + u2 / (2.0 * gamma_k * gamma_k)
}

/// Score with respect to a subject score variance, given the summed posterior
/// second moments of that component over the group's subjects.
pub fn score_lambda(lambda_k: f64, n_subjects: f64, sum_v2: f64) -> f64 {
    -0.5 * n_subjects / lambda_k + sum_v2 / (2.0 * lambda_k * lambda_k)
}

/// Score with respect to a diagonal entry of the between-group warp
/// covariance, given `E[eta eta' | y]`.
pub fn score_warp_group_diag(sigma_inv: &DMatrix<f64>, eta2: &DMatrix<f64>, k: usize) -> f64 {
    let a_k = sigma_inv.column(k);
    -0.5 * sigma_inv[(k, k)] + 0.5 * (a_k.transpose() * eta2 * a_k)[(0, 0)]
}

/// Score with respect to a diagonal entry of the within-group warp
/// covariance, given the summed `E[xi xi' | y]` over the group's subjects.
pub fn score_warp_subject_diag(
    omega_inv: &DMatrix<f64>,
    xi2_sum: &DMatrix<f64>,
    n_subjects: f64,
    k: usize,
) -> f64 {
    let b_k = omega_inv.column(k);
    -0.5 * n_subjects * omega_inv[(k, k)] + 0.5 * (b_k.transpose() * xi2_sum * b_k)[(0, 0)]
}

/// Per-group score vectors for the variance parameters.
#[derive(Debug, Clone)]
pub struct ScoreComponents {
    /// Per group: scores for `(gamma_1..p, lambda_1..q)`.
    pub amplitude: Vec<DVector<f64>>,
    /// Per group: scores for `(Sigma_11..rr, Omega_11..rr)`.
    pub warp: Vec<DVector<f64>>,
    pub warnings: Vec<String>,
}

/// Score vectors of each group's log marginal density with respect to the
/// variance parameters, evaluated at the moment-implied values.
pub fn score_components(fit: &FitResult) -> Result<ScoreComponents> {
    let mi = moment_implied(fit)?;
    let p = fit.params.p();
    let q = fit.params.q();
    let r = fit.params.r();
    let groups = &fit.posterior.groups;

    let mut amplitude = Vec::with_capacity(groups.len());
    for (g, &j_i) in groups.iter().zip(&mi.j_counts) {
        let mut s = DVector::zeros(p + q);
        for k in 0..p {
            s[k] = score_gamma(mi.gamma[k], g.uu[(k, k)]);
        }
        for k in 0..q {
            let sum_v: f64 = g.vv.iter().map(|vv| vv[(k, k)]).sum();
            s[p + k] = score_lambda(mi.lambda[k], j_i, sum_v);
        }
        amplitude.push(s);
    }

    let mut warp = Vec::with_capacity(groups.len());
    if r > 0 {
        let sigma_inv = crate::numeric::linalg::inv_spd(&mi.sigma)?;
        let omega_inv = crate::numeric::linalg::inv_spd(&mi.omega)?;
        for (g, &j_i) in groups.iter().zip(&mi.j_counts) {
            let mut s = DVector::zeros(2 * r);
            let xi_sum = g.xi2.iter().fold(DMatrix::zeros(r, r), |acc, x| acc + x);
            for k in 0..r {
                s[k] = score_warp_group_diag(&sigma_inv, &g.eta2, k);
                s[r + k] = score_warp_subject_diag(&omega_inv, &xi_sum, j_i, k);
            }
            warp.push(s);
        }
    } else {
        warp = vec![DVector::zeros(0); groups.len()];
    }

    Ok(ScoreComponents { amplitude, warp, warnings: mi.warnings })
}

/// An estimated information matrix with PSD-repair and conditioning
/// diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FisherMatrix {
    pub matrix: DMatrix<f64>,
    /// Whether negative eigenvalues were clipped during PSD repair.
    pub clipped: bool,
    pub condition: f64,
}

/// Empirical Fisher information for the amplitude variance parameters
/// `(gamma, lambda)`, by the moment-substitution formulas.
pub fn fisher_amplitude(fit: &FitResult) -> Result<FisherMatrix> {
    let mi = moment_implied(fit)?;
    let groups = &fit.posterior.groups;
    let n_groups = groups.len() as f64;
    if groups.len() < 3 {
        return Err(Error::invalid("Fisher estimation needs at least 3 groups"));
    }
    let p = fit.params.p();
    let q = fit.params.q();
    let dim = p + q;
    let mut f = DMatrix::zeros(dim, dim);

    // Per-group posterior quantities.
    let u2: Vec<DVector<f64>> = groups
        .iter()
        .map(|g| DVector::from_fn(p, |k, _| g.uu[(k, k)]))
        .collect();
    let v2: Vec<DVector<f64>> = groups
        .iter()
        .map(|g| DVector::from_fn(q, |k, _| g.vv.iter().map(|vv| vv[(k, k)]).sum()))
        .collect();

    for k in 0..p {
        for l in 0..p {
            let avg: f64 =
                u2.iter().map(|u| u[k] * u[l]).sum::<f64>() / n_groups;
            f[(k, l)] = -1.0 / (4.0 * mi.gamma[k] * mi.gamma[l])
                + avg / (4.0 * mi.gamma[k].powi(2) * mi.gamma[l].powi(2));
        }
        for l in 0..q {
            let avg: f64 = u2
                .iter()
                .zip(&v2)
                .map(|(u, v)| u[k] * v[l])
                .sum::<f64>()
                / n_groups;
            let j_avg: f64 = mi.j_counts.iter().sum::<f64>() / n_groups;
            f[(k, p + l)] = -j_avg / (4.0 * mi.gamma[k] * mi.lambda[l])
                + avg / (4.0 * mi.gamma[k].powi(2) * mi.lambda[l].powi(2));
            f[(p + l, k)] = f[(k, p + l)];
        }
    }
    for k in 0..q {
        for l in 0..q {
            let avg: f64 =
                v2.iter().map(|v| v[k] * v[l]).sum::<f64>() / n_groups;
            let j2_avg: f64 =
                mi.j_counts.iter().map(|j| j * j).sum::<f64>() / n_groups;
            f[(p + k, p + l)] = -j2_avg / (4.0 * mi.lambda[k] * mi.lambda[l])
                + avg / (4.0 * mi.lambda[k].powi(2) * mi.lambda[l].powi(2));
        }
    }
    Ok(finish_fisher(f))
}

/// Empirical Fisher information for the warp variance parameters
/// `(diag(Sigma), diag(Omega))`.
pub fn fisher_warp(fit: &FitResult) -> Result<FisherMatrix> {
    let mi = moment_implied(fit)?;
    let groups = &fit.posterior.groups;
    let n_groups = groups.len() as f64;
    if groups.len() < 3 {
        return Err(Error::invalid("Fisher estimation needs at least 3 groups"));
    }
    let r = fit.params.r();
    if r == 0 {
        return Err(Error::invalid("model has no warping component"));
    }
    let sigma_inv = crate::numeric::linalg::inv_spd(&mi.sigma)?;
    let omega_inv = crate::numeric::linalg::inv_spd(&mi.omega)?;

    // Quadratic forms a_k' E_i a_k and b_k' S_i b_k per group.
    let mut eta_quad = vec![DVector::zeros(r); groups.len()];
    let mut xi_quad = vec![DVector::zeros(r); groups.len()];
    for (i, g) in groups.iter().enumerate() {
        let xi_sum = g.xi2.iter().fold(DMatrix::zeros(r, r), |acc, x| acc + x);
        for k in 0..r {
            let a_k = sigma_inv.column(k);
            eta_quad[i][k] = (a_k.transpose() * &g.eta2 * a_k)[(0, 0)];
            let b_k = omega_inv.column(k);
            xi_quad[i][k] = (b_k.transpose() * &xi_sum * b_k)[(0, 0)];
        }
    }

    let j_avg: f64 = mi.j_counts.iter().sum::<f64>() / n_groups;
    let j2_avg: f64 = mi.j_counts.iter().map(|j| j * j).sum::<f64>() / n_groups;

    let mut g_mat = DMatrix::zeros(2 * r, 2 * r);
    for k in 0..r {
        for l in 0..r {
            let avg_ee: f64 =
                eta_quad.iter().map(|e| e[k] * e[l]).sum::<f64>() / n_groups;
            g_mat[(k, l)] = -0.25 * sigma_inv[(k, k)] * sigma_inv[(l, l)] + 0.25 * avg_ee;

            let avg_ex: f64 = eta_quad
                .iter()
                .zip(&xi_quad)
                .map(|(e, x)| e[k] * x[l])
                .sum::<f64>()
                / n_groups;
            g_mat[(k, r + l)] =
                -0.25 * j_avg * sigma_inv[(k, k)] * omega_inv[(l, l)] + 0.25 * avg_ex;
            g_mat[(r + l, k)] = g_mat[(k, r + l)];

            let avg_xx: f64 =
                xi_quad.iter().map(|x| x[k] * x[l]).sum::<f64>() / n_groups;
            g_mat[(r + k, r + l)] =
                -0.25 * j2_avg * omega_inv[(k, k)] * omega_inv[(l, l)] + 0.25 * avg_xx;
        }
    }
    Ok(finish_fisher(g_mat))
}

fn finish_fisher(mut m: DMatrix<f64>) -> FisherMatrix {
    symmetrize(&mut m);
    let (vals, vecs) = sym_eigen_desc(&m);
    let clipped = vals.iter().any(|&v| v < 0.0);
    if clipped {
        let fixed = DVector::from_fn(vals.len(), |i, _| vals[i].max(0.0));
        m = &vecs * DMatrix::from_diagonal(&fixed) * vecs.transpose();
        symmetrize(&mut m);
    }
    let condition = sym_condition(&m);
    FisherMatrix { matrix: m, clipped, condition }
}

/// Which variance ratio an asymptotic variance refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RatioKind {
    Amplitude,
    Warp,
}

/// Delta-method asymptotic variance of a variance-ratio estimator
/// (the variance of `sqrt(I) * (h_hat - h)`).
///
/// Computed as the quadratic form `grad' Finv grad`; the expanded triple-sum
/// form is algebraically identical and exercised by the test suite.
pub fn avar_h(kind: RatioKind, fit: &FitResult) -> Result<f64> {
    let (quad, _) = avar_h_both_forms(kind, fit)?;
    Ok(quad)
}

/// Both algebraic routes to the asymptotic variance: the quadratic form and
/// the expanded triple-sum over the inverse-information blocks.
pub fn avar_h_both_forms(kind: RatioKind, fit: &FitResult) -> Result<(f64, f64)> {
    let mi = moment_implied(fit)?;
    let (fisher, main_dims, grad_main, grad_resid, main_sum, resid_sum) = match kind {
        RatioKind::Amplitude => {
            let f = fisher_amplitude(fit)?;
            let p = fit.params.p();
            let sum_g: f64 = mi.gamma.iter().sum();
            let sum_l: f64 = mi.lambda.iter().sum();
            let total = sum_g + sum_l;
            (f, p, sum_l / total.powi(2), -sum_g / total.powi(2), sum_g, sum_l)
        }
        RatioKind::Warp => {
            let g = fisher_warp(fit)?;
            let r = fit.params.r();
            let tr_s = mi.sigma.trace();
            let tr_o = mi.omega.trace();
            let total = tr_s + tr_o;
            (g, r, tr_o / total.powi(2), -tr_s / total.powi(2), tr_s, tr_o)
        }
    };
    let dim = fisher.matrix.nrows();
    let resid_dims = dim - main_dims;

    let inv = pseudo_inverse(&fisher.matrix)?;
    let mut grad = DVector::zeros(dim);
    for k in 0..main_dims {
        grad[k] = grad_main;
    }
    for k in 0..resid_dims {
        grad[main_dims + k] = grad_resid;
    }
    let quad = (grad.transpose() * &inv * &grad)[(0, 0)];

    // Expanded triple-sum form.
    let total = main_sum + resid_sum;
    let mut block_mm = 0.0;
    let mut block_mr = 0.0;
    let mut block_rr = 0.0;
    for k in 0..main_dims {
        for l in 0..main_dims {
            block_mm += inv[(k, l)];
        }
        for l in 0..resid_dims {
            block_mr += inv[(k, main_dims + l)];
        }
    }
    for k in 0..resid_dims {
        for l in 0..resid_dims {
            block_rr += inv[(main_dims + k, main_dims + l)];
        }
    }
    let triple = resid_sum.powi(2) / total.powi(4) * block_mm
        - 2.0 * main_sum * resid_sum / total.powi(4) * block_mr
        + main_sum.powi(2) / total.powi(4) * block_rr;

    if quad < 0.0 {
        return Err(Error::computation("negative asymptotic variance from singular information"));
    }
    Ok((quad, triple))
}

fn pseudo_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (vals, vecs) = sym_eigen_desc(m);
    let n = m.nrows();
    let tol = 1e-12 * vals[0].abs().max(1e-300);
    let inv_vals = DVector::from_fn(n, |i, _| if vals[i] > tol { 1.0 / vals[i] } else { 0.0 });
    let mut out = &vecs * DMatrix::from_diagonal(&inv_vals) * vecs.transpose();
    symmetrize(&mut out);
    Ok(out)
}

/// A confidence interval on a variance ratio.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RatioInterval {
    pub lower: f64,
    pub upper: f64,
    /// True when the point estimate sits on the boundary and the interval
    /// degenerates to a point.
    pub degenerate: bool,
}

/// Arcsine-square-root confidence interval: a standard normal interval for
/// `asin(sqrt(h))` with variance `avar / (4 h (1-h) I)`, back-transformed
/// and clamped to `[0, 1]`.
pub fn ci_arcsin(h: f64, avar: f64, n_groups: usize, level: f64) -> Result<RatioInterval> {
    if !(0.0..=1.0).contains(&h) {
        return Err(Error::domain(format!("ratio {h} outside [0,1]")));
    }
    if avar < 0.0 {
        return Err(Error::invalid("negative asymptotic variance"));
    }
    if n_groups < 2 {
        return Err(Error::invalid("need at least 2 groups"));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::invalid(format!("confidence level {level} outside (0,1)")));
    }
    if h == 0.0 || h == 1.0 {
        return Ok(RatioInterval { lower: h, upper: h, degenerate: true });
    }
    let z = normal_quantile(0.5 * (1.0 + level))?;
    let half_width = z * (avar / (4.0 * h * (1.0 - h) * n_groups as f64)).sqrt();
    let center = h.sqrt().asin();
    let lo = (center - half_width).clamp(0.0, std::f64::consts::FRAC_PI_2);
    let hi = (center + half_width).clamp(0.0, std::f64::consts::FRAC_PI_2);
    Ok(RatioInterval { lower: lo.sin().powi(2), upper: hi.sin().powi(2), degenerate: false })
}

/// Result of a one-way ANOVA F test.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FTest {
    pub statistic: f64,
    pub df_between: f64,
    pub df_within: f64,
    pub p_value: f64,
    /// Zero within-group variance: the statistic is degenerate and the
    /// p-value is pinned at 0.
    pub degenerate: bool,
}

/// Classical one-way random-effects F test: `F = MSB / MSW` on
/// `(I - 1, n - I)` degrees of freedom, p-value through the regularized
/// incomplete beta function.
pub fn anova_f_test(groups: &[Vec<f64>]) -> Result<FTest> {
    let i_groups = groups.len();
    if i_groups < 2 {
        return Err(Error::invalid("F test needs at least two groups"));
    }
    if groups.iter().all(|g| g.len() < 2) {
        return Err(Error::invalid("F test needs at least one group with two values"));
    }
    if groups.iter().any(|g| g.is_empty()) {
        return Err(Error::invalid("empty group"));
    }
    let n: usize = groups.iter().map(|g| g.len()).sum();
    let grand: f64 = groups.iter().flatten().sum::<f64>() / n as f64;
    let mut ssb = 0.0;
    let mut ssw = 0.0;
    for g in groups {
        let mean: f64 = g.iter().sum::<f64>() / g.len() as f64;
        ssb += g.len() as f64 * (mean - grand).powi(2);
        ssw += g.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    }
    let df_between = (i_groups - 1) as f64;
    let df_within = (n - i_groups) as f64;
    let msb = ssb / df_between;
    let msw = ssw / df_within;
    if msw <= 0.0 {
        return Ok(FTest {
            statistic: f64::INFINITY,
            df_between,
            df_within,
            p_value: 0.0,
            degenerate: true,
        });
    }
    let statistic = msb / msw;
    let p_value = f_tail(statistic, df_between, df_within)?;
    Ok(FTest { statistic, df_between, df_within, p_value, degenerate: false })
}

/// Full inference summary on a fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceRatioReport {
    pub h_amplitude: Option<RatioSummary>,
    pub h_warp: Option<RatioSummary>,
    pub n_groups: usize,
    pub level: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatioSummary {
    pub point: f64,
    pub avar: f64,
    pub interval: RatioInterval,
    pub fisher: FisherMatrix,
}

/// Point estimates, asymptotic variances and back-transformed intervals for
/// both variance ratios of a fit.
pub fn variance_ratio_report(fit: &FitResult, level: f64) -> Result<VarianceRatioReport> {
    let n_groups = fit.posterior.groups.len();
    let mut warnings = Vec::new();

    let h_amplitude = if fit.params.p() + fit.params.q() > 0 {
        let point =
            variance_ratio_amplitude(&fit.params.group_variances, &fit.params.subject_variances)?;
        let fisher = fisher_amplitude(fit)?;
        let avar = avar_h(RatioKind::Amplitude, fit)?;
        let interval = ci_arcsin(point, avar, n_groups, level)?;
        if interval.degenerate {
            warnings.push("amplitude ratio at the boundary; interval degenerate".into());
        }
        Some(RatioSummary { point, avar, interval, fisher })
    } else {
        None
    };

    let h_warp = if fit.params.r() > 0 {
        let point =
            variance_ratio_warping(&fit.params.warp_group_cov, &fit.params.warp_subject_cov)?;
        let fisher = fisher_warp(fit)?;
        let avar = avar_h(RatioKind::Warp, fit)?;
        let interval = ci_arcsin(point, avar, n_groups, level)?;
        if interval.degenerate {
            warnings.push("warp ratio at the boundary; interval degenerate".into());
        }
        Some(RatioSummary { point, avar, interval, fisher })
    } else {
        None
    };

    let sc = score_components(fit)?;
    warnings.extend(sc.warnings);
    Ok(VarianceRatioReport { h_amplitude, h_warp, n_groups, level, warnings })
}

/// Bootstrap distributions of the two variance ratios.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub h_amplitude: Vec<f64>,
    pub h_warp: Vec<f64>,
    pub sd_amplitude: f64,
    pub sd_warp: f64,
    /// Replicates whose refit did not converge (kept, but flagged).
    pub non_converged: Vec<usize>,
}

/// Refit on one resample of whole groups; returns the two ratios and the
/// convergence flag.
pub fn bootstrap_replicate(
    data: &ObservationSet,
    config: &FitConfig,
    indices: &[usize],
) -> Result<(f64, f64, bool)> {
    let groups: Vec<GroupData> =
        indices.iter().map(|&i| data.group(i).clone()).collect();
    let resampled = ObservationSet::new(groups, data.interval())?;
    let fit = fit_warped_anova(&resampled, config)?;
    let h_z = if fit.params.p() + fit.params.q() > 0 {
        variance_ratio_amplitude(&fit.params.group_variances, &fit.params.subject_variances)?
    } else {
        f64::NAN
    };
    let h_w = if fit.params.r() > 0 {
        variance_ratio_warping(&fit.params.warp_group_cov, &fit.params.warp_subject_cov)?
    } else {
        f64::NAN
    };
    Ok((h_z, h_w, fit.converged))
}

/// Group bootstrap: resample the `I` groups with replacement and refit each
/// replicate with a reduced EM budget. Deterministic given the seed;
/// replicates run as a parallel map over derived RNG streams.
pub fn bootstrap_ratios(
    data: &ObservationSet,
    config: &FitConfig,
    n_replicates: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    if n_replicates < 1 {
        return Err(Error::invalid("need at least one bootstrap replicate"));
    }
    let i_groups = data.n_groups();
    let mut rep_config = config.clone();
    rep_config.em_max_iter = config.em_max_iter.min(60);

    let results: Vec<Result<(f64, f64, bool)>> = (0..n_replicates)
        .into_par_iter()
        .map(|rep| {
            let mut rng = stream(seed, &[BOOT_TAG, rep as u64]);
            let indices: Vec<usize> =
                (0..i_groups).map(|_| rng.random_range(0..i_groups)).collect();
            let mut cfg = rep_config.clone();
            cfg.seed = crate::numeric::rng::derive_seed(seed, &[BOOT_TAG, rep as u64, 1]);
            bootstrap_replicate(data, &cfg, &indices)
        })
        .collect();

    let mut h_amplitude = Vec::with_capacity(n_replicates);
    let mut h_warp = Vec::with_capacity(n_replicates);
    let mut non_converged = Vec::new();
    for (rep, res) in results.into_iter().enumerate() {
        let (hz, hw, converged) = res?;
        if !converged {
            non_converged.push(rep);
        }
        h_amplitude.push(hz);
        h_warp.push(hw);
    }
    let sd_amplitude = sd(&h_amplitude);
    let sd_warp = sd(&h_warp);
    Ok(BootstrapResult { h_amplitude, h_warp, sd_amplitude, sd_warp, non_converged })
}

fn sd(values: &[f64]) -> f64 {
    let finite: Vec<f64> = values.iter().cloned().filter(|v| v.is_finite()).collect();
    if finite.len() < 2 {
        return f64::NAN;
    }
    let mean: f64 = finite.iter().sum::<f64>() / finite.len() as f64;
    (finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (finite.len() - 1) as f64).sqrt()
}
