//! Least-squares curve registration over the warping family.
//!
//! Alternates (a) a pooled ridge spline fit of the template on the currently
//! warped grids with (b) per-subject Nelder-Mead minimization of the squared
//! residuals over the unconstrained Jupp coordinates. Used by the two-step
//! estimator as the pre-alignment stage.

use crate::basis::SplineBasis;
use crate::error::Result;
use crate::model::ObservationSet;
use crate::numeric::linalg::cholesky_jittered;
use crate::numeric::optim::nelder_mead;
use crate::warp::{KnotVector, WarpFunction};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::FitConfig;

/// Output of the registration stage.
#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// Fitted warp per group and subject.
    pub warps: Vec<Vec<WarpFunction>>,
    /// Jupp coordinates of the fitted warps.
    pub theta: Vec<Vec<Vec<f64>>>,
    /// Penalized total squared residual after each sweep (nonincreasing).
    pub objective_trace: Vec<f64>,
    /// Template coefficients from the final pooled fit.
    pub template_coef: DVector<f64>,
}

/// Register all subjects to a common template by least squares.
pub fn register_least_squares(
    data: &ObservationSet,
    config: &FitConfig,
) -> Result<RegistrationResult> {
    let (a, b) = data.interval();
    let knots = KnotVector::new(a, b, config.warp_knots.clone())?;
    let theta0 = knots.theta0().0;
    let r = knots.r();
    let basis = SplineBasis::with_equispaced_knots(
        config.basis_degree,
        config.basis_interior_knots,
        (a, b),
    )?;
    let s = basis.dimension();

    // Current state: one coordinate vector per subject, starting at the
    // identity warp.
    let mut theta: Vec<Vec<Vec<f64>>> = data
        .groups()
        .iter()
        .map(|g| vec![theta0.clone(); g.n_subjects()])
        .collect();

    let mut trace = Vec::with_capacity(config.register_sweeps + 1);
    let mut template = DVector::zeros(s);

    for _sweep in 0..config.register_sweeps.max(1) {
        // (a) Pooled template fit on the warped grids.
        let mut btb = DMatrix::zeros(s, s);
        let mut bty = DVector::zeros(s);
        for (i, group) in data.groups().iter().enumerate() {
            for j in 0..group.n_subjects() {
                let (times, values) = group.subject(j);
                let warp = knots.warp_from_jupp(&theta[i][j])?;
                let mut warped = Vec::with_capacity(times.len());
                for &t in times {
                    warped.push(warp.invert(t)?.clamp(a, b));
                }
                let design = basis.eval_matrix(&warped)?;
                btb += design.transpose() * &design;
                bty += design.transpose() * DVector::from_column_slice(values);
            }
        }
        let ridge = 1e-10 * (btb.trace() / s as f64).max(1e-12);
        let mut m = btb.clone();
        for i in 0..s {
            m[(i, i)] += ridge;
        }
        template = cholesky_jittered(&m)?.solve(&bty);

        // (b) Per-subject warp refinement; keep a proposal only when it
        // improves that subject's residual.
        let updated: Vec<Vec<Vec<f64>>> = data
            .groups()
            .par_iter()
            .enumerate()
            .map(|(i, group)| {
                (0..group.n_subjects())
                    .map(|j| {
                        let (times, values) = group.subject(j);
                        let current = &theta[i][j];
                        let objective = |th: &[f64]| {
                            subject_ssr(&basis, &knots, &template, times, values, th)
                                .unwrap_or(f64::INFINITY)
                        };
                        let current_val = objective(current);
                        let (cand, cand_val) =
                            nelder_mead(objective, current, 0.25, config.register_evals);
                        if cand_val < current_val {
                            cand
                        } else {
                            current.clone()
                        }
                    })
                    .collect()
            })
            .collect();
        theta = updated;

        // Penalized total objective after the sweep (template given warps).
        let mut total = ridge * template.dot(&template);
        for (i, group) in data.groups().iter().enumerate() {
            for j in 0..group.n_subjects() {
                let (times, values) = group.subject(j);
                total += subject_ssr(&basis, &knots, &template, times, values, &theta[i][j])?;
            }
        }
        trace.push(total);
        if r == 0 {
            break;
        }
    }

    let mut warps = Vec::with_capacity(data.n_groups());
    for group_theta in &theta {
        let per: Result<Vec<WarpFunction>> =
            group_theta.iter().map(|th| knots.warp_from_jupp(th)).collect();
        warps.push(per?);
    }
    Ok(RegistrationResult { warps, theta, objective_trace: trace, template_coef: template })
}

/// Sum of squared residuals of one subject against the template composed
/// with the inverse warp.
fn subject_ssr(
    basis: &SplineBasis,
    knots: &KnotVector,
    template: &DVector<f64>,
    times: &[f64],
    values: &[f64],
    theta: &[f64],
) -> Result<f64> {
    let (a, b) = basis.interval();
    let warp = knots.warp_from_jupp(theta)?;
    let mut ssr = 0.0;
    for (&t, &y) in times.iter().zip(values) {
        let point = warp.invert(t)?.clamp(a, b);
        let fitted = basis.spline_value(template, point)?;
        ssr += (y - fitted).powi(2);
    }
    Ok(ssr)
}
