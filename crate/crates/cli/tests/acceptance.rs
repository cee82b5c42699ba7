//! Acceptance suite: one test per release criterion, each printing a
//! `[PASS]` line with the measured quantities (run with `--nocapture` to see
//! them). The two long-running reproduction jobs are `#[ignore]`d and meant
//! for extended CI runs:
//!
//! ```text
//! cargo test -p warpanova-cli --test acceptance --release -- --ignored --nocapture
//! ```

mod support;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::process::Command;
use std::time::Instant;
use support::*;
use warpanova::estimation::{e_step, fit_common_anova, fit_warped_anova, FitConfig, McSchedule};
use warpanova::inference::{
    anova_f_test, avar_h, ci_arcsin, fisher_amplitude, fisher_warp,
    score_components, score_gamma, score_lambda, score_warp_group_diag, score_warp_subject_diag,
    variance_ratio_amplitude, variance_ratio_warping, RatioKind,
};
use warpanova::model::{amplitude_conditional_moments, ModelParams};
use warpanova::simulation::{
    estimation_knots, generate_replication, make_sim_model, run_benchmark, BenchmarkConfig,
};
use warpanova::warp::{jupp_forward, jupp_inverse};
use warpanova::{Estimator, KnotVector};
use nalgebra::{DMatrix, DVector};

#[test]
fn criterion_1_warp_family_unit_suite() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(12);

    // Jupp round trips: < 1e-12 on the model's realistic coordinate range;
    // the f64 landmark representation itself limits the extreme stress range
    // ([-5, 5]) to ~5e-11, checked at 1e-10.
    let mut worst_moderate = 0.0f64;
    let mut worst_stress = 0.0f64;
    for r in 1..=3usize {
        for _ in 0..1000 {
            let theta: Vec<f64> = (0..r).map(|_| 4.8 * rng.random::<f64>() - 2.4).collect();
            let tau = jupp_inverse(&theta, 0.0, 1.0);
            let back = jupp_forward(&tau, 0.0, 1.0).unwrap();
            for (t, b) in theta.iter().zip(&back.0) {
                worst_moderate = worst_moderate.max((t - b).abs());
            }
            let theta: Vec<f64> = (0..r).map(|_| 10.0 * rng.random::<f64>() - 5.0).collect();
            let tau = jupp_inverse(&theta, 0.0, 1.0);
            let back = jupp_forward(&tau, 0.0, 1.0).unwrap();
            for (t, b) in theta.iter().zip(&back.0) {
                worst_stress = worst_stress.max((t - b).abs());
            }
        }
    }
    assert!(worst_moderate < 1e-12, "moderate-range round trip {worst_moderate}");
    assert!(worst_stress < 1e-10, "stress-range round trip {worst_stress}");

    // Landmark interpolation to 1e-14, strict monotonicity on 1e4 grids,
    // identity reduction.
    let knots = KnotVector::new(0.0, 1.0, vec![0.25, 0.55, 0.8]).unwrap();
    let mut worst_interp = 0.0f64;
    for _ in 0..200 {
        let theta: Vec<f64> = (0..3).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
        let tau = jupp_inverse(&theta, 0.0, 1.0);
        let warp = knots.warp_to(&tau).unwrap();
        for (t0, t) in knots.tau0().iter().zip(&tau) {
            worst_interp = worst_interp.max((warp.eval(*t0).unwrap() - t).abs());
        }
        let mut prev = warp.eval(0.0).unwrap();
        for k in 1..10_000 {
            let t = if k == 9_999 { 1.0 } else { k as f64 / 9_999.0 };
            let v = warp.eval(t).unwrap();
            assert!(v > prev - 1e-12, "monotonicity violated at {t}");
            prev = v;
        }
    }
    assert!(worst_interp < 1e-14, "interpolation error {worst_interp}");

    let identity = knots.identity_warp();
    let mut worst_identity = 0.0f64;
    for k in 0..=10_000 {
        let t = k as f64 / 10_000.0;
        worst_identity = worst_identity.max((identity.eval(t).unwrap() - t).abs());
    }
    assert!(worst_identity < 1e-14, "identity deviation {worst_identity}");

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "runtime {elapsed:?} exceeds 5 s");
    println!(
        "[PASS] criterion 1: warp family (round trip {worst_moderate:.2e} / stress {worst_stress:.2e}, interpolation {worst_interp:.2e}, identity {worst_identity:.2e}, {elapsed:.2?})"
    );
}

#[test]
fn criterion_2_likelihood_oracle() {
    let start = Instant::now();
    let (params, data) = tiny_instance();

    // (a) Closed-form group likelihood vs brute-force Gauss-Hermite over the
    // amplitude scores, within 1e-6.
    let warps = warpanova::model::WarpEffects {
        group: vec![0.1],
        subjects: vec![vec![-0.06], vec![0.04]],
    };
    let mut worst = 0.0f64;
    for i in 0..data.n_groups() {
        let exact =
            warpanova::model::group_loglik_given_warps(&params, data.group(i), &warps).unwrap();
        let quad = amplitude_quadrature_loglik(&params, data.group(i), &warps, 300);
        worst = worst.max((exact - quad).abs());
    }
    assert!(worst < 1e-6, "closed form vs quadrature: {worst}");

    // (b) MH E-step moments vs 30-point product-rule quadrature over the
    // warping effects, within 3 MC standard errors.
    let group = data.group(0);
    let (eta2_quad, log_f) = warp_posterior_quadrature(&params, group, 30, |w| w.group[0].powi(2));
    let (u2_quad, _) = warp_posterior_quadrature(&params, group, 30, |w| {
        amplitude_conditional_moments(&params, group, w).unwrap().u_second_moment()[(0, 0)]
    });
    let mut eta2 = Vec::new();
    let mut u2 = Vec::new();
    let mut loglik = Vec::new();
    for chain in 0..6u64 {
        let post = e_step(&params, &data, 4000, 500 + chain).unwrap();
        eta2.push(post.groups[0].eta2[(0, 0)]);
        u2.push(post.groups[0].uu[(0, 0)]);
        loglik.push(post.groups[0].loglik);
    }
    for (name, samples, target) in [
        ("E[eta^2|y]", &eta2, eta2_quad),
        ("E[u^2|y]", &u2, u2_quad),
        ("log f", &loglik, log_f),
    ] {
        let (mean, se) = mean_se(samples);
        assert!(
            (mean - target).abs() < 3.0 * se + 1e-8,
            "{name}: MH {mean} vs quadrature {target} (se {se})"
        );
    }

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 120.0, "runtime {elapsed:?} exceeds 2 min");
    println!(
        "[PASS] criterion 2: likelihood oracle (closed form vs quadrature {worst:.2e}; MH moments within 3 se, {elapsed:.2?})"
    );
}

#[test]
fn criterion_3_score_and_fisher_checks() {
    let start = Instant::now();
    let (params, data) = tiny_instance();
    let group = 0usize;

    let marginal = |p: &ModelParams| -> f64 {
        warp_posterior_quadrature(p, data.group(group), 30, |_| 0.0).1
    };
    let fd = |perturb: &dyn Fn(&mut ModelParams, f64), scale: f64| -> f64 {
        let delta = 1e-4 * scale;
        let mut up = params.clone();
        perturb(&mut up, delta);
        let mut down = params.clone();
        perturb(&mut down, -delta);
        (marginal(&up) - marginal(&down)) / (2.0 * delta)
    };

    // Posterior moments by quadrature.
    let (u2, _) = warp_posterior_quadrature(&params, data.group(group), 30, |w| {
        amplitude_conditional_moments(&params, data.group(group), w).unwrap().u_second_moment()
            [(0, 0)]
    });
    let (v2_sum, _) = warp_posterior_quadrature(&params, data.group(group), 30, |w| {
        let m = amplitude_conditional_moments(&params, data.group(group), w).unwrap();
        (0..2).map(|j| m.v_second_moment(j)[(0, 0)]).sum()
    });
    let (eta2, _) =
        warp_posterior_quadrature(&params, data.group(group), 30, |w| w.group[0].powi(2));
    let (xi2_sum, _) = warp_posterior_quadrature(&params, data.group(group), 30, |w| {
        w.subjects.iter().map(|x| x[0] * x[0]).sum()
    });

    let mut worst_rel = 0.0f64;
    let mut check = |name: &str, formula: f64, numeric: f64| {
        let rel = (formula - numeric).abs() / numeric.abs().max(1.0);
        worst_rel = worst_rel.max(rel);
        assert!(rel < 1e-3, "{name}: formula {formula} vs fd {numeric} (rel {rel})");
    };
    check(
        "gamma",
        score_gamma(params.group_variances[0], u2),
        fd(&|p, d| p.group_variances[0] += d, params.group_variances[0]),
    );
    check(
        "lambda",
        score_lambda(params.subject_variances[0], 2.0, v2_sum),
        fd(&|p, d| p.subject_variances[0] += d, params.subject_variances[0]),
    );
    let sigma_inv = DMatrix::from_element(1, 1, 1.0 / params.warp_group_cov[(0, 0)]);
    check(
        "Sigma",
        score_warp_group_diag(&sigma_inv, &DMatrix::from_element(1, 1, eta2), 0),
        fd(&|p, d| p.warp_group_cov[(0, 0)] += d, params.warp_group_cov[(0, 0)]),
    );
    let omega_inv = DMatrix::from_element(1, 1, 1.0 / params.warp_subject_cov[(0, 0)]);
    check(
        "Omega",
        score_warp_subject_diag(&omega_inv, &DMatrix::from_element(1, 1, xi2_sum), 2.0, 0),
        fd(&|p, d| p.warp_subject_cov[(0, 0)] += d, params.warp_subject_cov[(0, 0)]),
    );

    // Information matrices equal the empirical score outer products at 1e-10.
    let spec = make_sim_model(3).unwrap();
    let (mdata, _) = generate_replication(&spec, 314).unwrap();
    let config = FitConfig {
        n_group_components: 1,
        n_subject_components: 1,
        warp_knots: estimation_knots(3),
        em_max_iter: 15,
        mc_schedule: McSchedule { initial: 60, double_every: 25, cap: 120 },
        seed: 9,
        ..FitConfig::default()
    };
    let fit = fit_warped_anova(&mdata, &config).unwrap();
    let scores = score_components(&fit).unwrap();
    let n = scores.amplitude.len() as f64;
    let f = fisher_amplitude(&fit).unwrap();
    let mut outer = DMatrix::zeros(2, 2);
    for s in &scores.amplitude {
        outer += s * s.transpose();
    }
    let dev_f = (&f.matrix - outer / n).abs().max();
    assert!(dev_f < 1e-10, "amplitude information vs outer products: {dev_f}");
    let g = fisher_warp(&fit).unwrap();
    let mut outer = DMatrix::zeros(2, 2);
    for s in &scores.warp {
        outer += s * s.transpose();
    }
    let dev_g = (&g.matrix - outer / n).abs().max();
    assert!(dev_g < 1e-10, "warp information vs outer products: {dev_g}");

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 300.0, "runtime {elapsed:?} exceeds 5 min");
    println!(
        "[PASS] criterion 3: scores vs finite differences (worst rel {worst_rel:.2e}); F/G vs outer products ({dev_f:.2e}, {dev_g:.2e}); {elapsed:.2?}"
    );
}

#[test]
fn criterion_4_em_sanity() {
    let start = Instant::now();

    // Exact E-step (r = 0): the log-likelihood trace is non-decreasing on 20
    // simulated datasets within 1e-9.
    let mut worst_drop = 0.0f64;
    for seed in 0..20u64 {
        let spec = make_sim_model(if seed % 2 == 0 { 1 } else { 2 }).unwrap();
        let (data, _) = generate_replication(&spec, 1000 + seed).unwrap();
        let config = FitConfig {
            n_group_components: 1,
            n_subject_components: 1,
            warp_knots: vec![],
            em_max_iter: 40,
            seed,
            ..FitConfig::default()
        };
        let fit = fit_common_anova(&data, &config).unwrap();
        for w in fit.loglik_trace.windows(2) {
            worst_drop = worst_drop.max(w[0].0 - w[1].0);
        }
    }
    assert!(worst_drop < 1e-9, "exact EM decreased the log-likelihood by {worst_drop}");

    // MCEM on a warped-model dataset: the window-3 median smoothed trace is
    // non-decreasing across every 30-iteration window within 2 MC ses.
    let spec = make_sim_model(3).unwrap();
    let (data, _) = generate_replication(&spec, 77).unwrap();
    let config = FitConfig {
        n_group_components: 1,
        n_subject_components: 1,
        warp_knots: estimation_knots(3),
        em_max_iter: 60,
        em_tol: 1e-12,
        mc_schedule: McSchedule { initial: 60, double_every: 25, cap: 240 },
        seed: 4,
        ..FitConfig::default()
    };
    let fit = fit_warped_anova(&data, &config).unwrap();
    let trace = &fit.loglik_trace;
    assert!(trace.len() >= 31, "need at least 31 iterations, got {}", trace.len());
    let med3 = |k: usize| -> f64 {
        let mut vals = [trace[k - 2].0, trace[k - 1].0, trace[k].0];
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        vals[1]
    };
    let mut worst_gap = f64::NEG_INFINITY;
    for k in 2..trace.len() - 29 {
        let lo = med3(k);
        let hi = med3(k + 29);
        let tol = 2.0 * (trace[k].1.powi(2) + trace[k + 29].1.powi(2)).sqrt();
        worst_gap = worst_gap.max(lo - hi - tol);
        assert!(hi >= lo - tol, "window [{k}, {}]: {lo} -> {hi} (tol {tol})", k + 29);
    }

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 600.0, "runtime {elapsed:?} exceeds 10 min");
    println!(
        "[PASS] criterion 4: EM sanity (exact worst drop {worst_drop:.2e}; MCEM worst window slack {worst_gap:.2e}; {elapsed:.2?})"
    );
}

#[test]
fn criterion_5_exact_ratio_values() {
    // Model 1 and Model 9 amplitude layouts.
    let m1 = make_sim_model(1).unwrap();
    let h1 = variance_ratio_amplitude(
        &DVector::from_vec(m1.group_vars.clone()),
        &DVector::from_vec(m1.subject_vars.clone()),
    )
    .unwrap();
    assert!((h1 - 0.80).abs() <= 1e-15, "h_z model 1 = {h1:.17}");
    let m9 = make_sim_model(9).unwrap();
    let h9 = variance_ratio_amplitude(
        &DVector::from_vec(m9.group_vars.clone()),
        &DVector::from_vec(m9.subject_vars.clone()),
    )
    .unwrap();
    assert!((h9 - 0.80).abs() <= 1e-15, "h_z model 9 = {h9:.17}");

    // Models 3 and 5 warp layouts.
    let m3 = make_sim_model(3).unwrap();
    let h3 = variance_ratio_warping(&m3.warp_group_cov, &m3.warp_subject_cov).unwrap();
    assert!((h3 - 0.80).abs() <= 1e-15, "h_w model 3 = {h3:.17}");
    let m5 = make_sim_model(5).unwrap();
    let h5 = variance_ratio_warping(&m5.warp_group_cov, &m5.warp_subject_cov).unwrap();
    assert!((h5 - 0.80).abs() <= 1e-15, "h_w model 5 = {h5:.17}");

    println!(
        "[PASS] criterion 5: h ratios equal 0.80 to machine precision ({h1:.17}, {h9:.17}, {h3:.17}, {h5:.17})"
    );
}

#[test]
fn criterion_6_desk_scale_benchmark_ordering() {
    let start = Instant::now();
    let config = BenchmarkConfig {
        model_ids: vec![1, 3, 4],
        n_reps: 50,
        estimators: vec![Estimator::Common, Estimator::TwoStep, Estimator::MaxLik],
        seed: 31415,
        em_max_iter: 80,
        em_tol: 1e-6,
        mc_schedule: McSchedule { initial: 60, double_every: 25, cap: 240 },
        grid_points: 2000,
        paper_literal: false,
    };
    let table = run_benchmark(&config).unwrap();
    assert!(table.failures.is_empty(), "fit failures: {:?}", table.failures);

    let cell = |model: usize, target: &str, est: Estimator| {
        table.cell(model, target, est).unwrap().metrics
    };

    // Evaluate every clause before asserting so a failure reports the whole
    // picture.
    let mut failures: Vec<String> = Vec::new();
    let mut record = |ok: bool, line: String| {
        println!("  [{}] {line}", if ok { "ok" } else { "FAIL" });
        if !ok {
            failures.push(line);
        }
    };
    for model in [3usize, 4] {
        let c = cell(model, "psi1", Estimator::Common).rmse;
        let two = cell(model, "psi1", Estimator::TwoStep).rmse;
        let ml = cell(model, "psi1", Estimator::MaxLik).rmse;
        record(
            ml < two && two < c,
            format!("model {model} rmse(psi1) ordering ML {ml:.3} < 2s {two:.3} < C {c:.3}"),
        );
        record(ml < 0.5 * c, format!("model {model} rmse(psi1) ML {ml:.3} < 0.5 C ({:.3})", 0.5 * c));
        let bias_ml = cell(model, "phi1", Estimator::MaxLik).bias;
        let bias_two = cell(model, "phi1", Estimator::TwoStep).bias;
        record(
            bias_ml < bias_two,
            format!("model {model} bias(phi1) ML {bias_ml:.3} < 2s {bias_two:.3}"),
        );
    }
    let mu_c = cell(1, "mu", Estimator::Common).rmse;
    let mu_ml = cell(1, "mu", Estimator::MaxLik).rmse;
    let rel = (mu_ml - mu_c).abs() / mu_c;
    record(rel < 0.25, format!("model 1 no-overfit rmse(mu) C {mu_c:.4} vs ML {mu_ml:.4} (rel {rel:.3})"));

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 7200.0, "runtime {elapsed:?} exceeds 2 h");
    assert!(failures.is_empty(), "criterion 6 clauses failed:\n{}", failures.join("\n"));
    println!("[PASS] criterion 6: desk-scale benchmark orderings at 50 replications ({elapsed:.1?})");
}

/// Published rmse cells: (model, target, C, 2s, ML).
const PUBLISHED_RMSE: &[(usize, &str, f64, f64, f64)] = &[
    (1, "mu", 0.055, 0.057, 0.056),
    (1, "phi1", 0.064, 0.143, 0.084),
    (1, "psi1", 0.121, 0.175, 0.121),
    (2, "mu", 0.051, 0.054, 0.058),
    (2, "phi1", 0.189, 0.233, 0.165),
    (2, "psi1", 0.113, 0.215, 0.145),
    (3, "mu", 0.109, 0.089, 0.089),
    (3, "phi1", 0.559, 0.168, 0.154),
    (3, "psi1", 0.806, 0.192, 0.169),
    (4, "mu", 0.111, 0.091, 0.094),
    (4, "phi1", 0.436, 0.239, 0.194),
    (4, "psi1", 1.134, 0.235, 0.233),
    (5, "mu", 0.139, 0.103, 0.122),
    (5, "phi1", 0.644, 0.269, 0.323),
    (5, "psi1", 0.960, 0.282, 0.275),
    (6, "mu", 0.136, 0.106, 0.116),
    (6, "phi1", 0.551, 0.310, 0.250),
    (6, "psi1", 1.065, 0.473, 0.393),
    (7, "mu", 0.116, 0.108, 0.130),
    (7, "phi1", 0.332, 0.273, 0.211),
    (7, "psi1", 0.957, 0.257, 0.225),
    (8, "mu", 0.110, 0.093, 0.101),
    (8, "phi1", 0.407, 0.266, 0.206),
    (8, "psi1", 1.061, 0.235, 0.217),
    (9, "mu", 0.112, 0.091, 0.106),
    (9, "phi1", 0.678, 0.395, 0.585),
    (9, "phi2", 0.673, 1.085, 0.904),
    (9, "psi1", 0.852, 0.332, 0.449),
    (9, "psi2", 1.222, 0.429, 0.863),
    (10, "mu", 0.143, 0.116, 0.143),
    (10, "phi1", 0.748, 0.439, 0.679),
    (10, "phi2", 0.896, 1.087, 0.967),
    (10, "psi1", 0.984, 0.389, 0.533),
    (10, "psi2", 1.211, 0.726, 0.940),
];

#[test]
#[ignore = "extended job (several hours): full 200-replication reproduction across all ten models; required for release, not for merge"]
fn criterion_7_full_table_reproduction() {
    let start = Instant::now();
    let config = BenchmarkConfig {
        model_ids: (1..=10).collect(),
        n_reps: 200,
        estimators: vec![Estimator::Common, Estimator::TwoStep, Estimator::MaxLik],
        seed: 2718,
        em_max_iter: 100,
        em_tol: 1e-6,
        mc_schedule: McSchedule { initial: 60, double_every: 25, cap: 400 },
        grid_points: 2000,
        paper_literal: false,
    };
    let table = run_benchmark(&config).unwrap();
    let mut failures = Vec::new();
    for &(model, target, c_ref, two_ref, ml_ref) in PUBLISHED_RMSE {
        for (est, reference, tol) in [
            (Estimator::Common, c_ref, 0.30),
            (Estimator::TwoStep, two_ref, 0.40),
            (Estimator::MaxLik, ml_ref, 0.30),
        ] {
            let got = table.cell(model, target, est).unwrap().metrics.rmse;
            let rel = (got - reference).abs() / reference;
            println!(
                "  model {model} {target} {}: rmse {got:.3} vs published {reference:.3} (rel {rel:.2})",
                est.label()
            );
            if rel > tol {
                failures.push(format!(
                    "model {model} {target} {}: {got:.3} vs {reference:.3} (rel {rel:.2} > {tol})",
                    est.label()
                ));
            }
        }
    }
    assert!(failures.is_empty(), "cells outside tolerance:\n{}", failures.join("\n"));
    println!("[PASS] criterion 7: full table reproduction ({:.1?})", start.elapsed());
}

#[test]
#[ignore = "extended job (~1-2 h): delta-method calibration at 200 replications with 50 groups"]
fn criterion_8_delta_method_calibration() {
    let start = Instant::now();
    let mut spec = make_sim_model(3).unwrap();
    spec.n_groups = 50;
    let n_reps = 200usize;
    let results: Vec<(f64, f64, bool)> = (0..n_reps)
        .map(|rep| {
            let (data, _) =
                generate_replication(&spec, 9000 + rep as u64).expect("generation");
            let config = FitConfig {
                n_group_components: 1,
                n_subject_components: 1,
                warp_knots: estimation_knots(3),
                em_max_iter: 50,
                mc_schedule: McSchedule { initial: 60, double_every: 25, cap: 160 },
                seed: rep as u64,
                ..FitConfig::default()
            };
            let fit = fit_warped_anova(&data, &config).expect("fit");
            let h = variance_ratio_amplitude(
                &fit.params.group_variances,
                &fit.params.subject_variances,
            )
            .unwrap();
            let avar = avar_h(RatioKind::Amplitude, &fit).unwrap();
            let ci = ci_arcsin(h, avar, 50, 0.90).unwrap();
            (h, avar, ci.lower <= 0.80 && 0.80 <= ci.upper)
        })
        .collect();

    let hs: Vec<f64> = results.iter().map(|r| r.0).collect();
    let mean_h = hs.iter().sum::<f64>() / n_reps as f64;
    let sd_h =
        (hs.iter().map(|h| (h - mean_h).powi(2)).sum::<f64>() / (n_reps - 1) as f64).sqrt();
    let mut asym: Vec<f64> = results.iter().map(|r| (r.1 / 50.0).sqrt()).collect();
    asym.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let asym_med = asym[n_reps / 2];
    let ratio = sd_h / asym_med;
    let coverage = results.iter().filter(|r| r.2).count() as f64 / n_reps as f64;
    println!(
        "  MC sd {sd_h:.4}, median asymptotic sd {asym_med:.4} (ratio {ratio:.2}); coverage {coverage:.3}"
    );
    assert!((0.5..=2.0).contains(&ratio), "sd ratio {ratio} outside [0.5, 2]");
    assert!((0.80..=0.97).contains(&coverage), "coverage {coverage} outside [0.80, 0.97]");
    println!("[PASS] criterion 8: delta-method calibration ({:.1?})", start.elapsed());
}

#[test]
fn criterion_9_f_test_correctness() {
    let start = Instant::now();
    use statrs::distribution::{ContinuousCDF, FisherSnedecor};

    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst_f = 0.0f64;
    let mut worst_p = 0.0f64;
    for layout in 0..100 {
        let n_groups = 2 + (rng.random::<f64>() * 5.0) as usize;
        let balanced = layout % 2 == 0;
        let groups: Vec<Vec<f64>> = (0..n_groups)
            .map(|g| {
                let n = if balanced { 5 } else { 2 + (rng.random::<f64>() * 6.0) as usize };
                (0..n).map(|_| g as f64 * 0.3 + rng.random::<f64>() * 2.0 - 1.0).collect()
            })
            .collect();

        // Brute-force sums-of-squares oracle, straight from the definitional
        // sums.
        let n_total: usize = groups.iter().map(|g| g.len()).sum();
        let grand: f64 = groups.iter().flatten().sum::<f64>() / n_total as f64;
        let mut ss_between = 0.0;
        let mut ss_within = 0.0;
        for g in &groups {
            let mean: f64 = g.iter().sum::<f64>() / g.len() as f64;
            ss_between += g.len() as f64 * (mean - grand).powi(2);
            for v in g {
                ss_within += (v - mean).powi(2);
            }
        }
        let df1 = (groups.len() - 1) as f64;
        let df2 = (n_total - groups.len()) as f64;
        let f_oracle = (ss_between / df1) / (ss_within / df2);

        let result = anova_f_test(&groups).unwrap();
        worst_f = worst_f.max((result.statistic - f_oracle).abs());
        assert!((result.statistic - f_oracle).abs() < 1e-10);

        let p_ref = 1.0 - FisherSnedecor::new(df1, df2).unwrap().cdf(result.statistic);
        worst_p = worst_p.max((result.p_value - p_ref).abs());
        assert!(
            (result.p_value - p_ref).abs() < 1e-8,
            "p-value {} vs reference {p_ref}",
            result.p_value
        );
    }
    println!(
        "[PASS] criterion 9: F test vs oracle (statistic {worst_f:.2e}, p-value {worst_p:.2e}; {:.2?})",
        start.elapsed()
    );
}

fn run_cli_in(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_warpanova"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().to_string(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    entries.sort();
    entries
}

/// Run one subcommand twice from two separate working directories with
/// identical relative arguments, and require byte-identical output trees
/// (manifests included, since they echo only relative paths).
fn assert_identical_reruns(name: &str, prepare: &dyn Fn(&Path), args: &[&str]) {
    let root = tempfile::tempdir().unwrap();
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let cwd = root.path().join(run);
        std::fs::create_dir_all(&cwd).unwrap();
        prepare(&cwd);
        let output = run_cli_in(&cwd, args);
        assert!(
            output.status.success(),
            "{name} run {run} failed: {}",
            String::from_utf8_lossy(&output.stderr)
        );
        trees.push(read_dir_bytes(&cwd.join("out")));
    }
    let names_a: Vec<&String> = trees[0].iter().map(|(n, _)| n).collect();
    assert_eq!(names_a, trees[1].iter().map(|(n, _)| n).collect::<Vec<_>>());
    for ((file, bytes_a), (_, bytes_b)) in trees[0].iter().zip(&trees[1]) {
        assert!(bytes_a == bytes_b, "{name}: {file} differs between identical runs");
    }
}

#[test]
fn criterion_10_byte_identical_reruns() {
    let start = Instant::now();

    assert_identical_reruns(
        "simulate",
        &|_| {},
        &["--threads", "2", "simulate", "--model", "5", "--seed", "7", "--out", "out"],
    );

    // A dataset for the fit runs, generated once and copied into each cwd.
    let sim = tempfile::tempdir().unwrap();
    let output = run_cli_in(
        sim.path(),
        &["--threads", "2", "simulate", "--model", "3", "--seed", "9", "--out", "out"],
    );
    assert!(output.status.success());
    let data = std::fs::read(sim.path().join("out/data.csv")).unwrap();

    assert_identical_reruns(
        "fit",
        &|cwd| std::fs::write(cwd.join("data.csv"), &data).unwrap(),
        &[
            "--threads", "2", "fit", "--input", "data.csv", "--out", "out",
            "-p", "1", "-q", "1", "--tau0", "0.3",
            "--em-iters", "8", "--mc-size", "40", "--seed", "11", "--bootstrap", "2",
        ],
    );

    assert_identical_reruns(
        "benchmark",
        &|_| {},
        &[
            "--threads", "2", "benchmark", "--models", "1,3", "--reps", "3",
            "--em-iters", "6", "--mc-size", "30", "--mc-cap", "30",
            "--grid", "200", "--seed", "1", "--out", "out",
        ],
    );

    println!(
        "[PASS] criterion 10: byte-identical reruns for simulate/fit/benchmark ({:.1?})",
        start.elapsed()
    );
}
