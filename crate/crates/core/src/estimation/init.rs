//! Moment-style starting values for the EM loop.
//!
//! The mean comes from a pooled ridge fit; the group components from the
//! J-metric eigendecomposition of the between-group covariance of per-group
//! coefficient fits; the subject components from the within-group residual
//! coefficient covariance; the noise variance from local first differences.
//!
//! When the model has a warping component, a least-squares registration pass
//! runs first: the coefficient fits are computed on the aligned grids, the
//! warp covariances start at the method-of-moments ANOVA of the registered
//! coordinates, and the sampler chains start at the registered effects.
//! Without this, early EM iterations misattribute timing variation to the
//! amplitude factors and the group variance can collapse into a local
//! optimum it cannot leave.

use crate::basis::{gram_orthonormalize, SplineBasis};
use crate::error::{Error, Result};
use crate::model::{ModelParams, ObservationSet};
use crate::numeric::linalg::{cholesky_jittered, psd_clip};
use crate::warp::KnotVector;
use nalgebra::{DMatrix, DVector};

use super::register::{register_least_squares, RegistrationResult};
use super::{warp_moment_anova, FitConfig};

/// Floor for the initial warp covariances; keeps the sampler mobile even
/// when the registration finds almost no timing variation.
const WARP_COV_FLOOR: f64 = 1e-4;

pub fn initialize_params(data: &ObservationSet, config: &FitConfig) -> Result<ModelParams> {
    Ok(initialize_internal(data, config)?.0)
}

pub(super) fn initialize_internal(
    data: &ObservationSet,
    config: &FitConfig,
) -> Result<(ModelParams, Option<RegistrationResult>)> {
    config.validate()?;
    let (a, b) = data.interval();
    let basis = SplineBasis::with_equispaced_knots(
        config.basis_degree,
        config.basis_interior_knots,
        (a, b),
    )?;
    let s = basis.dimension();
    let p = config.n_group_components;
    let q = config.n_subject_components;
    if p > s || q > s {
        return Err(Error::invalid(format!(
            "component counts (p={p}, q={q}) exceed the basis dimension {s}"
        )));
    }
    if data.n_obs_total() < s {
        return Err(Error::invalid(format!(
            "only {} observations for a basis of dimension {s}",
            data.n_obs_total()
        )));
    }
    let knots = KnotVector::new(a, b, config.warp_knots.clone())?;
    let r = knots.r();
    let gram = basis.gram();

    // Registration pass when warping is on: aligned grids + warp covariance
    // starting values.
    let registration = if r > 0 { Some(register_least_squares(data, config)?) } else { None };

    let aligned_times = |i: usize, j: usize, times: &[f64]| -> Result<Vec<f64>> {
        match &registration {
            Some(reg) => times
                .iter()
                .map(|&t| Ok(reg.warps[i][j].invert(t)?.clamp(a, b)))
                .collect(),
            None => Ok(times.to_vec()),
        }
    };

    // Pooled ridge fit of the mean on (aligned) grids.
    let mut btb = DMatrix::zeros(s, s);
    let mut bty = DVector::zeros(s);
    let mut group_normals = Vec::with_capacity(data.n_groups());
    for (i, group) in data.groups().iter().enumerate() {
        let mut gb = DMatrix::zeros(s, s);
        let mut gy = DVector::zeros(s);
        for j in 0..group.n_subjects() {
            let (times, values) = group.subject(j);
            let design = basis.eval_matrix(&aligned_times(i, j, times)?)?;
            gb += design.transpose() * &design;
            gy += design.transpose() * DVector::from_column_slice(values);
        }
        btb += &gb;
        bty += &gy;
        group_normals.push((gb, gy));
    }
    let ridge = 1e-8 * btb.trace() / s as f64;
    let mean_coef = ridge_solve(&btb, &bty, ridge)?;

    // Per-group coefficient fits for the between-group covariance.
    let mut group_fits = Vec::with_capacity(data.n_groups());
    for (gb, gy) in &group_normals {
        let fit_ridge = 1e-6 * (gb.trace() / s as f64).max(1e-12);
        group_fits.push(ridge_solve(gb, gy, fit_ridge)?);
    }
    let i_groups = data.n_groups() as f64;
    let mut mean_fit = DVector::zeros(s);
    for f in &group_fits {
        mean_fit += f;
    }
    mean_fit /= i_groups;
    let mut between = DMatrix::zeros(s, s);
    for f in &group_fits {
        let d = f - &mean_fit;
        between += &d * d.transpose();
    }
    between /= (i_groups - 1.0).max(1.0);

    // Per-subject residual coefficient fits for the within-group covariance.
    let mut within = DMatrix::zeros(s, s);
    let mut n_resid = 0.0;
    for (i, (group, gfit)) in data.groups().iter().zip(&group_fits).enumerate() {
        for j in 0..group.n_subjects() {
            let (times, values) = group.subject(j);
            let design = basis.eval_matrix(&aligned_times(i, j, times)?)?;
            let resid = DVector::from_column_slice(values) - &design * gfit;
            let sb = design.transpose() * &design;
            let sy = design.transpose() * resid;
            let sub_ridge = 1e-2 * (sb.trace() / s as f64).max(1e-12);
            let coef = ridge_solve(&sb, &sy, sub_ridge)?;
            within += &coef * coef.transpose();
            n_resid += 1.0;
        }
    }
    within /= (n_resid - i_groups).max(1.0);

    let (group_components, group_variances) = leading_components(&between, p, &gram, s)?;
    let (subject_components, subject_variances) = leading_components(&within, q, &gram, s)?;

    // Warp covariances: method-of-moments ANOVA on the registered
    // coordinates, floored so the sampler stays mobile.
    let (warp_group_cov, warp_subject_cov) = match &registration {
        Some(reg) => {
            let theta0 = knots.theta0().0;
            let (sigma, omega) = warp_moment_anova(&reg.theta, &theta0)?;
            let (sigma, _) = psd_clip(&sigma, WARP_COV_FLOOR);
            let (omega, _) = psd_clip(&omega, WARP_COV_FLOOR);
            (sigma, omega)
        }
        None => (DMatrix::zeros(0, 0), DMatrix::zeros(0, 0)),
    };

    // Noise variance from local first differences (upward biased by curve
    // slope, good enough as a start), floored against degenerate data.
    let mut diff_sq = 0.0;
    let mut n_diff = 0.0;
    for group in data.groups() {
        for j in 0..group.n_subjects() {
            let (_, values) = group.subject(j);
            for w in values.windows(2) {
                diff_sq += (w[1] - w[0]).powi(2);
                n_diff += 1.0;
            }
        }
    }
    let noise_var = if n_diff > 0.0 { (diff_sq / (2.0 * n_diff)).max(1e-8) } else { 1e-2 };

    let params = ModelParams {
        basis,
        knots,
        mean_coef,
        group_components,
        subject_components,
        group_variances,
        subject_variances,
        warp_group_cov,
        warp_subject_cov,
        noise_var,
    };
    params.validate(&gram)?;
    Ok((params, registration))
}

/// Registered warp effects, used to seed the sampler chains: the group
/// effect is the group mean of the registered coordinates around `theta0`,
/// the subject effects are the within-group deviations.
pub(super) fn registered_effects(
    reg: &RegistrationResult,
    theta0: &[f64],
) -> Vec<(DVector<f64>, Vec<DVector<f64>>)> {
    let r = theta0.len();
    reg.theta
        .iter()
        .map(|group_theta| {
            let nj = group_theta.len() as f64;
            let mut mean = vec![0.0; r];
            for th in group_theta {
                for k in 0..r {
                    mean[k] += th[k] / nj;
                }
            }
            let eta = DVector::from_fn(r, |k, _| mean[k] - theta0[k]);
            let xi = group_theta
                .iter()
                .map(|th| DVector::from_fn(r, |k, _| th[k] - mean[k]))
                .collect();
            (eta, xi)
        })
        .collect()
}

fn ridge_solve(btb: &DMatrix<f64>, bty: &DVector<f64>, ridge: f64) -> Result<DVector<f64>> {
    let s = btb.nrows();
    let mut m = btb.clone();
    for i in 0..s {
        m[(i, i)] += ridge.max(1e-12);
    }
    Ok(cholesky_jittered(&m)?.solve(bty))
}

fn leading_components(
    cov: &DMatrix<f64>,
    k: usize,
    gram: &crate::basis::GramMatrix,
    s: usize,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if k == 0 {
        return Ok((DMatrix::zeros(s, 0), DVector::zeros(0)));
    }
    let (all, vars) = gram_orthonormalize(&DMatrix::identity(s, s), cov, gram)?;
    let comp = all.columns(0, k).into_owned();
    let mut lead = DVector::zeros(k);
    for i in 0..k {
        lead[i] = vars[i].max(1e-6);
    }
    // Keep the floor from breaking the descending order.
    for i in 1..k {
        if lead[i] > lead[i - 1] {
            lead[i] = lead[i - 1];
        }
    }
    Ok((comp, lead))
}
