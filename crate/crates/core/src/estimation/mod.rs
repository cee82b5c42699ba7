//! The three estimators: maximum-likelihood warped ANOVA via Monte Carlo EM,
//! common (unwarped) functional ANOVA, and the naive two-step estimator
//! (least-squares registration followed by common ANOVA on the aligned data).

mod estep;
mod init;
mod mstep;
mod register;

pub use estep::e_step;
pub use init::initialize_params;
pub use mstep::m_step;
pub use register::{register_least_squares, RegistrationResult};

use crate::error::{Error, Result};
use crate::model::{ModelParams, ObservationSet};
use crate::numeric::linalg::psd_clip;
use estep::{e_step_internal, ChainState, DesignCache};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Which estimator produced a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Estimator {
    Common,
    TwoStep,
    MaxLik,
}

impl Estimator {
    /// Column label used in benchmark tables.
    pub fn label(&self) -> &'static str {
        match self {
            Estimator::Common => "C",
            Estimator::TwoStep => "2s",
            Estimator::MaxLik => "ML",
        }
    }
}

/// Monte Carlo sample-size schedule across EM iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSchedule {
    pub initial: usize,
    pub double_every: usize,
    pub cap: usize,
}

impl Default for McSchedule {
    fn default() -> Self {
        McSchedule { initial: 100, double_every: 20, cap: 1600 }
    }
}

impl McSchedule {
    pub fn size_at(&self, iteration: usize) -> usize {
        let doublings = (iteration / self.double_every.max(1)).min(31);
        (self.initial << doublings).min(self.cap.max(self.initial))
    }
}

/// Fitting configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Number of group-factor amplitude components (p).
    pub n_group_components: usize,
    /// Number of residual-term amplitude components (q).
    pub n_subject_components: usize,
    /// Warping knots `tau0`; empty disables warping.
    pub warp_knots: Vec<f64>,
    pub basis_degree: usize,
    pub basis_interior_knots: usize,
    pub em_max_iter: usize,
    /// Relative tolerance on the smoothed log-likelihood trace.
    pub em_tol: f64,
    pub mc_schedule: McSchedule,
    /// Initial random-walk proposal scale (relative to the prior covariance
    /// square root); adapted toward 20-40% acceptance during burn-in.
    pub mh_step: f64,
    /// Penalty weight on tr(Sigma) + tr(Omega); zero disables the penalty.
    pub penalty: f64,
    pub seed: u64,
    /// Sweeps of the two-step registration loop.
    pub register_sweeps: usize,
    /// Objective evaluations per subject per registration sweep.
    pub register_evals: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            n_group_components: 1,
            n_subject_components: 1,
            warp_knots: vec![],
            basis_degree: 3,
            basis_interior_knots: 10,
            em_max_iter: 200,
            em_tol: 1e-6,
            mc_schedule: McSchedule::default(),
            mh_step: 0.25,
            penalty: 0.0,
            seed: 0,
            register_sweeps: 5,
            register_evals: 200,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.em_tol <= 0.0 {
            return Err(Error::invalid("em_tol must be positive"));
        }
        if self.mh_step <= 0.0 {
            return Err(Error::invalid("mh_step must be positive"));
        }
        if self.penalty < 0.0 {
            return Err(Error::invalid("penalty must be nonnegative"));
        }
        if self.basis_degree < 1 {
            return Err(Error::invalid("basis degree must be at least 1"));
        }
        for w in self.warp_knots.windows(2) {
            if !(w[0] < w[1]) {
                return Err(Error::invalid("warp knots must be strictly increasing"));
            }
        }
        Ok(())
    }

    /// Copy with warping disabled (used by the common estimator).
    pub fn without_warping(&self) -> FitConfig {
        let mut c = self.clone();
        c.warp_knots.clear();
        c
    }
}

/// Per-group posterior summaries produced by the E-step.
#[derive(Debug, Clone)]
pub struct GroupPosterior {
    /// `E[u u' | y]` (p x p).
    pub uu: DMatrix<f64>,
    /// `E[u | y]`.
    pub u_mean: DVector<f64>,
    /// Per subject `E[v v' | y]` (q x q).
    pub vv: Vec<DMatrix<f64>>,
    /// Per subject `E[v | y]`.
    pub v_mean: Vec<DVector<f64>>,
    /// `E[eta eta' | y]` (r x r).
    pub eta2: DMatrix<f64>,
    /// `E[eta | y]`.
    pub eta_mean: DVector<f64>,
    /// Per subject `E[xi xi' | y]` (r x r).
    pub xi2: Vec<DMatrix<f64>>,
    /// Per subject `E[xi | y]`.
    pub xi_mean: Vec<DVector<f64>>,
    /// Importance-weighted estimate of `log f(y_i.)` and its MC standard
    /// error (exact with zero error when r = 0).
    pub loglik: f64,
    pub loglik_se: f64,
    /// Effective Monte Carlo sample size of the chain.
    pub ess: f64,
    /// MH acceptance rate after adaptation.
    pub accept_rate: f64,
}

/// Accumulated weighted-least-squares system for the mean/component update:
/// `normal * vec([m C D]) = rhs`, averaged over posterior draws.
#[derive(Debug, Clone)]
pub struct WlsSystem {
    pub normal: DMatrix<f64>,
    pub rhs: DVector<f64>,
    /// Total sum of squared observations (constant in the draws).
    pub y_sq: f64,
    pub n_obs: usize,
}

/// Output of one E-step over all groups.
#[derive(Debug, Clone)]
pub struct PosteriorSummaries {
    pub groups: Vec<GroupPosterior>,
    pub wls: WlsSystem,
    /// Kept Monte Carlo draws per group.
    pub mc_size: usize,
    /// Total log-likelihood estimate and standard error.
    pub loglik: f64,
    pub loglik_se: f64,
}

impl PosteriorSummaries {
    pub fn min_ess(&self) -> f64 {
        self.groups.iter().map(|g| g.ess).fold(f64::INFINITY, f64::min)
    }
}

/// Posterior-mean predictions of the latent effects.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictedEffects {
    /// Per group: predicted group amplitude scores.
    pub u: Vec<DVector<f64>>,
    /// Per group, per subject: predicted subject amplitude scores.
    pub v: Vec<Vec<DVector<f64>>>,
    /// Per group: predicted group warp effect.
    pub eta: Vec<DVector<f64>>,
    /// Per group, per subject: predicted subject warp effect.
    pub xi: Vec<Vec<DVector<f64>>>,
    /// Per group, per subject: predicted warp coordinates
    /// `theta0 + eta + xi`.
    pub theta: Vec<Vec<Vec<f64>>>,
}

/// A converged (or stopped) fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    /// Estimated log-likelihood (and MC standard error) per EM iteration.
    pub loglik_trace: Vec<(f64, f64)>,
    /// Refreshed posterior summaries at the final parameters.
    pub posterior: PosteriorSummaries,
    pub predicted: PredictedEffects,
    pub converged: bool,
    pub iterations: usize,
    pub estimator: Estimator,
    pub warnings: Vec<String>,
}

impl FitResult {
    /// Final log-likelihood estimate.
    pub fn loglik(&self) -> f64 {
        self.posterior.loglik
    }
}

/// Median of the last three entries (window-3 median smoothing).
fn smoothed(trace: &[(f64, f64)], k: usize) -> f64 {
    let lo = k.saturating_sub(2);
    let mut vals: Vec<f64> = trace[lo..=k].iter().map(|t| t.0).collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    vals[vals.len() / 2]
}

/// Maximum-likelihood warped functional ANOVA via Monte Carlo EM.
///
/// Alternates the Metropolis-within-Gibbs E-step with the closed-form M-step
/// until the relative change of a window-3 median smoothed log-likelihood
/// estimate drops below `em_tol` or `em_max_iter` is reached.
/// Non-convergence is reported through the result flag, not as an error.
pub fn fit_warped_anova(data: &ObservationSet, config: &FitConfig) -> Result<FitResult> {
    fit_with_estimator(data, config, Estimator::MaxLik)
}

/// Common (unwarped) functional ANOVA: identical machinery with warping
/// disabled, which makes the E-step exact.
pub fn fit_common_anova(data: &ObservationSet, config: &FitConfig) -> Result<FitResult> {
    fit_with_estimator(data, &config.without_warping(), Estimator::Common)
}

fn fit_with_estimator(
    data: &ObservationSet,
    config: &FitConfig,
    estimator: Estimator,
) -> Result<FitResult> {
    config.validate()?;
    let (mut params, registration) = init::initialize_internal(data, config)?;
    let gram = params.basis.gram();
    let mut warnings = Vec::new();

    let cache = DesignCache::build(&params, data)?;
    let mut chain = match &registration {
        Some(reg) => {
            let theta0 = params.knots.theta0().0;
            ChainState::seeded(config.mh_step, init::registered_effects(reg, &theta0))
        }
        None => ChainState::fresh(&params, data, config.mh_step),
    };

    let mut trace: Vec<(f64, f64)> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut small_changes = 0usize;

    for iter in 0..config.em_max_iter {
        iterations = iter + 1;
        let mc = config.mc_schedule.size_at(iter);
        let post = e_step_internal(&params, data, mc, config.seed, iter as u64, &cache, &mut chain)?;
        trace.push((post.loglik, post.loglik_se));
        params = m_step(&post, data, &params, &gram, config, &mut warnings)?;

        // Relative change of the window-3 median smoothed trace, measured
        // across a full window displacement so the compared medians share no
        // samples, and required twice in a row (one noisy coincidence must
        // not stop the run).
        if trace.len() >= 6 {
            let k = trace.len() - 1;
            let cur = smoothed(&trace, k);
            let prev = smoothed(&trace, k - 3);
            if (cur - prev).abs() / (1.0 + prev.abs()) < config.em_tol {
                small_changes += 1;
            } else {
                small_changes = 0;
            }
            if small_changes >= 2 {
                converged = true;
                break;
            }
        }
    }

    // Finish with one EM step on a 4x Monte Carlo sample (cuts the MC noise
    // in the reported coefficients), then refresh the posterior moments at
    // the final parameters for predictions and inference.
    let final_mc = 4 * config.mc_schedule.size_at(iterations.saturating_sub(1));
    let post = e_step_internal(
        &params,
        data,
        final_mc,
        config.seed,
        config.em_max_iter as u64 + 1,
        &cache,
        &mut chain,
    )?;
    params = m_step(&post, data, &params, &gram, config, &mut warnings)?;
    let post = e_step_internal(
        &params,
        data,
        final_mc,
        config.seed,
        config.em_max_iter as u64 + 2,
        &cache,
        &mut chain,
    )?;
    let predicted = predicted_effects(&params, &post);

    Ok(FitResult {
        params,
        loglik_trace: trace,
        posterior: post,
        predicted,
        converged,
        iterations,
        estimator,
        warnings,
    })
}

fn predicted_effects(params: &ModelParams, post: &PosteriorSummaries) -> PredictedEffects {
    let theta0 = params.knots.theta0().0;
    let mut u = Vec::new();
    let mut v = Vec::new();
    let mut eta = Vec::new();
    let mut xi = Vec::new();
    let mut theta = Vec::new();
    for g in &post.groups {
        u.push(g.u_mean.clone());
        v.push(g.v_mean.clone());
        eta.push(g.eta_mean.clone());
        xi.push(g.xi_mean.clone());
        let per_subject = g
            .xi_mean
            .iter()
            .map(|xij| {
                theta0
                    .iter()
                    .enumerate()
                    .map(|(k, &t0)| t0 + g.eta_mean[k] + xij[k])
                    .collect::<Vec<f64>>()
            })
            .collect();
        theta.push(per_subject);
    }
    PredictedEffects { u, v, eta, xi, theta }
}

/// The naive two-step estimator: least-squares registration, then common
/// ANOVA on the aligned data. Warp covariances are estimated from the
/// registered coordinates by method-of-moments one-way ANOVA.
pub fn fit_two_step(data: &ObservationSet, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    if config.warp_knots.is_empty() {
        // Nothing to register, identical to the common estimator.
        let mut fit = fit_common_anova(data, config)?;
        fit.estimator = Estimator::TwoStep;
        return Ok(fit);
    }
    let registration = register_least_squares(data, config)?;

    // Transform each subject's grid by the inverse fitted warp.
    let (a, b) = data.interval();
    let mut groups = Vec::with_capacity(data.n_groups());
    for (i, group) in data.groups().iter().enumerate() {
        let mut subjects = Vec::with_capacity(group.n_subjects());
        for j in 0..group.n_subjects() {
            let (times, values) = group.subject(j);
            let w = &registration.warps[i][j];
            let warped: Result<Vec<f64>> =
                times.iter().map(|&t| Ok(w.invert(t)?.clamp(a, b))).collect();
            subjects.push((warped?, values.to_vec()));
        }
        groups.push(crate::model::GroupData::from_subjects(&subjects)?);
    }
    let aligned = ObservationSet::new(groups, data.interval())?;

    let mut fit = fit_common_anova(&aligned, config)?;
    fit.estimator = Estimator::TwoStep;

    // Method-of-moments ANOVA on the registered coordinates.
    let knots = crate::warp::KnotVector::new(a, b, config.warp_knots.clone())?;
    let theta0 = knots.theta0().0;
    let r = theta0.len();
    let (sigma, omega) = warp_moment_anova(&registration.theta, &theta0)?;
    let (sigma, clipped_s) = psd_clip(&sigma, 1e-10);
    let (omega, clipped_o) = psd_clip(&omega, 1e-10);
    if clipped_s || clipped_o {
        fit.warnings.push("two-step warp covariance clipped to the PSD cone".into());
    }
    fit.params.knots = knots;
    fit.params.warp_group_cov = sigma;
    fit.params.warp_subject_cov = omega;

    // Predicted warp effects from the registration. The posterior summaries
    // carry the matching point-mass second moments so downstream inference
    // (scores, warp information) treats the registered effects as the
    // two-step estimator's plug-in posterior.
    let mut eta_all = Vec::new();
    let mut xi_all = Vec::new();
    let mut theta_all = Vec::new();
    for (i, thetas) in registration.theta.iter().enumerate() {
        let nj = thetas.len() as f64;
        let mut mean = vec![0.0; r];
        for th in thetas {
            for k in 0..r {
                mean[k] += th[k] / nj;
            }
        }
        let eta: DVector<f64> = DVector::from_fn(r, |k, _| mean[k] - theta0[k]);
        let xi: Vec<DVector<f64>> = thetas
            .iter()
            .map(|th| DVector::from_fn(r, |k, _| th[k] - mean[k]))
            .collect();

        let post = &mut fit.posterior.groups[i];
        post.eta2 = &eta * eta.transpose();
        post.eta_mean = eta.clone();
        post.xi2 = xi.iter().map(|x| x * x.transpose()).collect();
        post.xi_mean = xi.clone();

        eta_all.push(eta);
        xi_all.push(xi);
        theta_all.push(thetas.clone());
    }
    fit.predicted.eta = eta_all;
    fit.predicted.xi = xi_all;
    fit.predicted.theta = theta_all;

    Ok(fit)
}

/// One-way method-of-moments ANOVA on registered warp coordinates, with the
/// standard unbalanced-design correction for the between-group mean square.
fn warp_moment_anova(
    theta: &[Vec<Vec<f64>>],
    theta0: &[f64],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let r = theta0.len();
    let i_groups = theta.len();
    let n: usize = theta.iter().map(|g| g.len()).sum();
    if i_groups < 2 || n <= i_groups {
        return Err(Error::invalid(
            "method-of-moments warp ANOVA needs at least two groups and replicated subjects",
        ));
    }
    let mut grand = DVector::zeros(r);
    let mut group_means = Vec::with_capacity(i_groups);
    for g in theta {
        let mut m = DVector::zeros(r);
        for th in g {
            for k in 0..r {
                m[k] += th[k];
            }
        }
        m /= g.len() as f64;
        grand += &m * g.len() as f64;
        group_means.push(m);
    }
    grand /= n as f64;

    let mut msw = DMatrix::zeros(r, r);
    for (g, mean) in theta.iter().zip(&group_means) {
        for th in g {
            let d = DVector::from_fn(r, |k, _| th[k] - mean[k]);
            msw += &d * d.transpose();
        }
    }
    msw /= (n - i_groups) as f64;

    let mut msb = DMatrix::zeros(r, r);
    for (g, mean) in theta.iter().zip(&group_means) {
        let d = mean - &grand;
        msb += (g.len() as f64) * &d * d.transpose();
    }
    msb /= (i_groups - 1) as f64;

    let sum_sq: f64 = theta.iter().map(|g| (g.len() * g.len()) as f64).sum();
    let j_eff = (n as f64 - sum_sq / n as f64) / (i_groups - 1) as f64;
    let sigma = (msb - &msw) / j_eff;
    Ok((sigma, msw))
}
