//! M-step: closed-form parameter updates from posterior summaries.
//!
//! The mean and component coefficients solve the accumulated weighted
//! least-squares system; the score variances come from averaged second
//! moments; the pair is then rotated back onto the J-orthonormal,
//! descending-diagonal parameterization by `gram_orthonormalize`, which
//! leaves the marginal likelihood unchanged (it depends on the components
//! only through the implied covariance functions).

use crate::basis::{gram_orthonormalize, GramMatrix};
use crate::error::{Error, Result};
use crate::model::{ModelParams, ObservationSet};
use crate::numeric::linalg::{cholesky_jittered, psd_clip, symmetrize};
use nalgebra::{DMatrix, DVector};

use super::{FitConfig, PosteriorSummaries};

const VARIANCE_FLOOR: f64 = 1e-10;
const NOISE_FLOOR: f64 = 1e-12;

pub fn m_step(
    posterior: &PosteriorSummaries,
    data: &ObservationSet,
    params_old: &ModelParams,
    gram: &GramMatrix,
    config: &FitConfig,
    warnings: &mut Vec<String>,
) -> Result<ModelParams> {
    let p = params_old.p();
    let q = params_old.q();
    let r = params_old.r();
    let s = params_old.s();
    let n_groups = data.n_groups() as f64;
    let n_subjects = data.n_subjects_total() as f64;

    // Mean and raw component coefficients from the WLS normal equations.
    let chol = cholesky_jittered(&posterior.wls.normal).map_err(|_| {
        Error::computation(
            "rank-deficient design accumulation; reduce the basis dimension or the component counts",
        )
    })?;
    let g_vec = chol.solve(&posterior.wls.rhs);
    let g_mat = DMatrix::from_column_slice(s, 1 + p + q, g_vec.as_slice());
    let mean_coef = g_mat.column(0).into_owned();
    let c_raw = g_mat.columns(1, p).into_owned();
    let d_raw = g_mat.columns(1 + p, q).into_owned();

    // Noise variance from the quadratic form at the solution.
    let fitted_quad = g_vec.dot(&(&posterior.wls.normal * &g_vec));
    let cross = g_vec.dot(&posterior.wls.rhs);
    let mut noise_var = (posterior.wls.y_sq - 2.0 * cross + fitted_quad)
        / posterior.wls.n_obs as f64;
    if noise_var < NOISE_FLOOR {
        warnings.push(format!("noise variance {noise_var:.3e} clamped to the floor"));
        noise_var = NOISE_FLOOR;
    }

    // Score covariances from averaged second moments, then rotation onto the
    // constrained parameterization.
    let (group_components, group_variances) = if p > 0 {
        let mut gamma_full = DMatrix::zeros(p, p);
        for g in &posterior.groups {
            gamma_full += &g.uu;
        }
        gamma_full /= n_groups;
        symmetrize(&mut gamma_full);
        let (comp, vars) = gram_orthonormalize(&c_raw, &gamma_full, gram)?;
        (comp, floor_variances(vars, "group", warnings))
    } else {
        (DMatrix::zeros(s, 0), DVector::zeros(0))
    };

    let (subject_components, subject_variances) = if q > 0 {
        let mut lambda_full = DMatrix::zeros(q, q);
        for g in &posterior.groups {
            for vv in &g.vv {
                lambda_full += vv;
            }
        }
        lambda_full /= n_subjects;
        symmetrize(&mut lambda_full);
        let (comp, vars) = gram_orthonormalize(&d_raw, &lambda_full, gram)?;
        (comp, floor_variances(vars, "subject", warnings))
    } else {
        (DMatrix::zeros(s, 0), DVector::zeros(0))
    };

    // Warp covariances: averaged posterior second moments with the penalty
    // shrinkage factor, then PSD repair at the floor.
    let (warp_group_cov, warp_subject_cov) = if r > 0 {
        let mut sigma = DMatrix::zeros(r, r);
        for g in &posterior.groups {
            sigma += &g.eta2;
        }
        sigma /= n_groups;
        sigma *= n_groups / (n_groups + 2.0 * config.penalty);
        let (sigma, clipped) = psd_clip(&sigma, VARIANCE_FLOOR);
        if clipped {
            warnings.push("between-group warp covariance clipped at the floor".into());
        }

        let mut omega = DMatrix::zeros(r, r);
        for g in &posterior.groups {
            for xi2 in &g.xi2 {
                omega += xi2;
            }
        }
        omega /= n_subjects;
        omega *= n_subjects / (n_subjects + 2.0 * config.penalty);
        let (omega, clipped) = psd_clip(&omega, VARIANCE_FLOOR);
        if clipped {
            warnings.push("within-group warp covariance clipped at the floor".into());
        }
        (sigma, omega)
    } else {
        (DMatrix::zeros(0, 0), DMatrix::zeros(0, 0))
    };

    let params = ModelParams {
        basis: params_old.basis.clone(),
        knots: params_old.knots.clone(),
        mean_coef,
        group_components,
        subject_components,
        group_variances,
        subject_variances,
        warp_group_cov,
        warp_subject_cov,
        noise_var,
    };
    params.validate(gram)?;
    Ok(params)
}

fn floor_variances(vars: DVector<f64>, which: &str, warnings: &mut Vec<String>) -> DVector<f64> {
    let mut out = vars;
    let mut flagged = false;
    for v in out.iter_mut() {
        if *v < VARIANCE_FLOOR {
            *v = VARIANCE_FLOOR;
            flagged = true;
        }
    }
    if flagged {
        warnings.push(format!("{which} score variance clamped to the 1e-10 floor"));
    }
    out
}
