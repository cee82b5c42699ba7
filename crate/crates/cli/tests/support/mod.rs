//! Oracle machinery for the acceptance suite. Deliberately re-implemented
//! here (rather than shared with the library or its unit tests) so the
//! acceptance checks stay independent of the code paths they certify.

use nalgebra::{DMatrix, DVector};
use warpanova::basis::gram_orthonormalize;
use warpanova::model::{
    group_loglik_given_warps, simulate_from_model, GroupData, ModelParams, ObservationSet,
    SimulationDesign, WarpEffects,
};
use warpanova::{KnotVector, SplineBasis};

/// Gauss-Hermite nodes and weights for the weight function `exp(-x^2)`,
/// via the Jacobi-matrix eigenvalue construction.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        jac[(k, k - 1)] = b;
        jac[(k - 1, k)] = b;
    }
    let eig = jac.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let w = std::f64::consts::PI.sqrt() * eig.eigenvectors[(0, i)].powi(2);
            (eig.eigenvalues[i], w)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    pairs.into_iter().unzip()
}

/// Nodes and normalized weights for `E[f(X)]` with `X ~ N(0, variance)`.
pub fn gauss_hermite_normal(n: usize, variance: f64) -> (Vec<f64>, Vec<f64>) {
    let (nodes, weights) = gauss_hermite(n);
    let scale = (2.0 * variance).sqrt();
    let norm = std::f64::consts::PI.sqrt();
    (
        nodes.iter().map(|&x| scale * x).collect(),
        weights.iter().map(|&w| w / norm).collect(),
    )
}

pub fn logsumexp(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// The tiny oracle instance: 2 groups, 2 subjects, 4 observations each,
/// one amplitude component per factor, one warping knot.
pub fn tiny_instance() -> (ModelParams, ObservationSet) {
    let basis = SplineBasis::with_equispaced_knots(3, 2, (0.0, 1.0)).unwrap();
    let gram = basis.gram();
    let s = basis.dimension();
    let raw = DMatrix::from_fn(s, 2, |i, j| ((i * 5 + j * 7 + 2) as f64 * 0.43).sin());
    let (comps, _) = gram_orthonormalize(&raw, &DMatrix::identity(2, 2), &gram).unwrap();
    let params = ModelParams {
        basis: basis.clone(),
        knots: KnotVector::new(0.0, 1.0, vec![0.4]).unwrap(),
        mean_coef: DVector::from_fn(s, |i, _| 0.8 + 0.5 * (i as f64 * 0.9).sin()),
        group_components: comps.columns(0, 1).into_owned(),
        subject_components: comps.columns(1, 1).into_owned(),
        group_variances: DVector::from_element(1, 0.05),
        subject_variances: DVector::from_element(1, 0.02),
        warp_group_cov: DMatrix::from_element(1, 1, 0.03),
        warp_subject_cov: DMatrix::from_element(1, 1, 0.015),
        noise_var: 0.01,
    };
    let design = SimulationDesign {
        n_groups: 2,
        subjects_per_group: 2,
        grid: vec![0.1, 0.35, 0.65, 0.9],
    };
    let (data, _) = simulate_from_model(&params, &design, 2718).unwrap();
    (params, data)
}

const LN_2PI: f64 = 1.837_877_066_409_345_6;

/// Brute-force Gauss-Hermite integral of the group density over the
/// amplitude scores, conditional on the warps (two-subject groups).
pub fn amplitude_quadrature_loglik(
    params: &ModelParams,
    group: &GroupData,
    warps: &WarpEffects,
    n_nodes: usize,
) -> f64 {
    let gamma = params.group_variances[0];
    let lambda = params.subject_variances[0];
    let sigma2 = params.noise_var;
    let n_subj = group.n_subjects();
    let theta0 = params.knots.theta0().0;
    let mut designs = Vec::new();
    for j in 0..n_subj {
        let theta = warps.theta_for_subject(&theta0, j);
        let warp = params.knots.warp_from_jupp(&theta).unwrap();
        let (times, _) = group.subject(j);
        designs.push(warpanova::warp::warped_basis_matrix(&params.basis, &warp, times).unwrap());
    }
    let (u_nodes, u_weights) = gauss_hermite_normal(n_nodes, gamma);
    let (v_nodes, v_weights) = gauss_hermite_normal(n_nodes, lambda);
    let gauss_ll = |j: usize, u: f64, v: f64| -> f64 {
        let (_, values) = group.subject(j);
        let coef = &params.mean_coef
            + params.group_components.column(0) * u
            + params.subject_components.column(0) * v;
        let fitted = &designs[j] * coef;
        let mut ll = 0.0;
        for (k, &y) in values.iter().enumerate() {
            ll += -0.5 * (LN_2PI + sigma2.ln()) - 0.5 * (y - fitted[k]).powi(2) / sigma2;
        }
        ll
    };
    let mut terms = Vec::with_capacity(n_nodes);
    for (iu, &u) in u_nodes.iter().enumerate() {
        let mut log_term = u_weights[iu].ln();
        for j in 0..n_subj {
            let inner: Vec<f64> = v_nodes
                .iter()
                .zip(&v_weights)
                .map(|(&v, &w)| w.ln() + gauss_ll(j, u, v))
                .collect();
            log_term += logsumexp(&inner);
        }
        terms.push(log_term);
    }
    logsumexp(&terms)
}

/// Product-rule quadrature over the warping effects of a two-subject group:
/// posterior expectation of a functional plus the marginal log-likelihood.
pub fn warp_posterior_quadrature<F>(
    params: &ModelParams,
    group: &GroupData,
    n_nodes: usize,
    mut g: F,
) -> (f64, f64)
where
    F: FnMut(&WarpEffects) -> f64,
{
    let sigma = params.warp_group_cov[(0, 0)];
    let omega = params.warp_subject_cov[(0, 0)];
    let (eta_nodes, eta_weights) = gauss_hermite_normal(n_nodes, sigma);
    let (xi_nodes, xi_weights) = gauss_hermite_normal(n_nodes, omega);
    let mut log_terms = Vec::new();
    let mut values = Vec::new();
    for (ie, &eta) in eta_nodes.iter().enumerate() {
        for (i1, &xi1) in xi_nodes.iter().enumerate() {
            for (i2, &xi2) in xi_nodes.iter().enumerate() {
                let warps =
                    WarpEffects { group: vec![eta], subjects: vec![vec![xi1], vec![xi2]] };
                let ll = group_loglik_given_warps(params, group, &warps).unwrap();
                let logw = eta_weights[ie].ln() + xi_weights[i1].ln() + xi_weights[i2].ln();
                log_terms.push(logw + ll);
                values.push(g(&warps));
            }
        }
    }
    let log_norm = logsumexp(&log_terms);
    let mut expectation = 0.0;
    for (lt, v) in log_terms.iter().zip(&values) {
        expectation += (lt - log_norm).exp() * v;
    }
    (expectation, log_norm)
}

/// Mean and standard error of independent samples.
pub fn mean_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
