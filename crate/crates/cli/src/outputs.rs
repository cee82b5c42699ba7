//! Machine-readable outputs: params.json, report.json, plot-ready CSV files
//! and the reproducibility manifest.
//!
//! CSV numbers are printed with 17 significant digits so values round-trip
//! losslessly; JSON numbers use the shortest lossless decimal form.

use serde::Serialize;
use std::io::Write;
use std::path::Path;
use warpanova::estimation::FitResult;
use warpanova::inference::{BootstrapResult, FTest, VarianceRatioReport};
use warpanova::{Error, Result};

/// Full-precision CSV float format (17 significant digits).
pub fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_file(path: &Path, content: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)
        .map_err(|e| Error::computation(format!("cannot create {}: {e}", path.display())))?;
    f.write_all(content.as_bytes())
        .map_err(|e| Error::computation(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| Error::computation(format!("serialization failed: {e}")))?;
    write_file(path, &(body + "\n"))
}

/// One line per EM iteration in the report.
#[derive(Serialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub loglik: f64,
    pub se: f64,
}

#[derive(Serialize)]
pub struct RatioReportJson {
    pub point: f64,
    pub avar: f64,
    pub level: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub degenerate: bool,
    pub fisher_condition: f64,
    pub fisher_clipped: bool,
}

#[derive(Serialize)]
pub struct FTestJson {
    pub label: String,
    pub statistic: f64,
    pub df_between: f64,
    pub df_within: f64,
    pub p_value: f64,
    pub degenerate: bool,
}

#[derive(Serialize)]
pub struct BootstrapJson {
    pub replicates: usize,
    pub sd_amplitude: f64,
    pub sd_warp: f64,
    pub non_converged: Vec<usize>,
    pub h_amplitude: Vec<f64>,
    pub h_warp: Vec<f64>,
}

#[derive(Serialize)]
pub struct ReportJson {
    pub estimator: String,
    pub converged: bool,
    pub iterations: usize,
    pub loglik: f64,
    pub loglik_se: f64,
    pub loglik_trace: Vec<TraceEntry>,
    pub noise_var: f64,
    pub group_variances: Vec<f64>,
    pub subject_variances: Vec<f64>,
    pub h_amplitude: Option<RatioReportJson>,
    pub h_warp: Option<RatioReportJson>,
    pub f_tests: Vec<FTestJson>,
    pub bootstrap: Option<BootstrapJson>,
    pub log_y: bool,
    pub rescale_endpoints: bool,
    pub warnings: Vec<String>,
}

pub fn build_report(
    fit: &FitResult,
    ratios: &VarianceRatioReport,
    f_tests: Vec<(String, FTest)>,
    bootstrap: Option<&BootstrapResult>,
    log_y: bool,
    rescale_endpoints: bool,
) -> ReportJson {
    let ratio_json = |part: &Option<warpanova::inference::RatioSummary>| {
        part.as_ref().map(|r| RatioReportJson {
            point: r.point,
            avar: r.avar,
            level: ratios.level,
            ci_lower: r.interval.lower,
            ci_upper: r.interval.upper,
            degenerate: r.interval.degenerate,
            fisher_condition: r.fisher.condition,
            fisher_clipped: r.fisher.clipped,
        })
    };
    let mut warnings = fit.warnings.clone();
    warnings.extend(ratios.warnings.clone());
    ReportJson {
        estimator: fit.estimator.label().to_string(),
        converged: fit.converged,
        iterations: fit.iterations,
        loglik: fit.posterior.loglik,
        loglik_se: fit.posterior.loglik_se,
        loglik_trace: fit
            .loglik_trace
            .iter()
            .enumerate()
            .map(|(i, &(loglik, se))| TraceEntry { iteration: i + 1, loglik, se })
            .collect(),
        noise_var: fit.params.noise_var,
        group_variances: fit.params.group_variances.iter().cloned().collect(),
        subject_variances: fit.params.subject_variances.iter().cloned().collect(),
        h_amplitude: ratio_json(&ratios.h_amplitude),
        h_warp: ratio_json(&ratios.h_warp),
        f_tests: f_tests
            .into_iter()
            .map(|(label, t)| FTestJson {
                label,
                statistic: t.statistic,
                df_between: t.df_between,
                df_within: t.df_within,
                p_value: t.p_value,
                degenerate: t.degenerate,
            })
            .collect(),
        bootstrap: bootstrap.map(|b| BootstrapJson {
            replicates: b.h_amplitude.len(),
            sd_amplitude: b.sd_amplitude,
            sd_warp: b.sd_warp,
            non_converged: b.non_converged.clone(),
            h_amplitude: b.h_amplitude.clone(),
            h_warp: b.h_warp.clone(),
        }),
        log_y,
        rescale_endpoints,
        warnings,
    }
}

/// Fitted trajectories on a dense grid: `group,subject,t,fitted`.
pub fn fitted_curves_csv(
    fit: &FitResult,
    group_ids: &[String],
    subject_ids: &[Vec<String>],
    grid_points: usize,
) -> Result<String> {
    let params = &fit.params;
    let (a, b) = params.basis.interval();
    let grid: Vec<f64> = (0..grid_points)
        .map(|k| a + (b - a) * k as f64 / (grid_points as f64 - 1.0))
        .collect();
    let mut out = String::from("group,subject,t,fitted\n");
    for (i, gid) in group_ids.iter().enumerate() {
        for (j, sid) in subject_ids[i].iter().enumerate() {
            let coef = &params.mean_coef
                + &params.group_components * &fit.predicted.u[i]
                + &params.subject_components * &fit.predicted.v[i][j];
            let warp = if params.r() > 0 {
                Some(params.knots.warp_from_jupp(&fit.predicted.theta[i][j])?)
            } else {
                None
            };
            for &t in &grid {
                let point = match &warp {
                    Some(w) => w.invert(t)?.clamp(a, b),
                    None => t,
                };
                let value = params.basis.spline_value(&coef, point)?;
                out.push_str(&format!("{gid},{sid},{},{}\n", fmt(t), fmt(value)));
            }
        }
    }
    Ok(out)
}

/// Fitted warp functions on a dense grid: `group,subject,t,w`.
pub fn warps_csv(
    fit: &FitResult,
    group_ids: &[String],
    subject_ids: &[Vec<String>],
    grid_points: usize,
) -> Result<String> {
    let params = &fit.params;
    let (a, b) = params.basis.interval();
    let grid: Vec<f64> = (0..grid_points)
        .map(|k| a + (b - a) * k as f64 / (grid_points as f64 - 1.0))
        .collect();
    let mut out = String::from("group,subject,t,w\n");
    for (i, gid) in group_ids.iter().enumerate() {
        for (j, sid) in subject_ids[i].iter().enumerate() {
            let warp = if params.r() > 0 {
                Some(params.knots.warp_from_jupp(&fit.predicted.theta[i][j])?)
            } else {
                None
            };
            for &t in &grid {
                let w = match &warp {
                    Some(w) => w.eval(t)?,
                    None => t,
                };
                out.push_str(&format!("{gid},{sid},{},{}\n", fmt(t), fmt(w)));
            }
        }
    }
    Ok(out)
}

/// Long-format dataset CSV, re-ingestable by `fit`.
pub fn data_csv(data: &warpanova::ObservationSet) -> String {
    let mut out = String::from("group_id,subject_id,t,y\n");
    for i in 0..data.n_groups() {
        let g = data.group(i);
        for j in 0..g.n_subjects() {
            let (t, y) = g.subject(j);
            for (&tk, &yk) in t.iter().zip(y) {
                out.push_str(&format!("g{:03},s{:03},{},{}\n", i + 1, j + 1, fmt(tk), fmt(yk)));
            }
        }
    }
    out
}

/// Benchmark table in the published layout: one row per (model, target),
/// bias/sd/rmse columns for each estimator.
pub fn benchmark_csv(
    table: &warpanova::simulation::BenchmarkTable,
    estimators: &[warpanova::Estimator],
) -> String {
    let mut out = String::from("model,target");
    for metric in ["bias", "sd", "rmse"] {
        for est in estimators {
            out.push_str(&format!(",{}_{}", metric, est.label()));
        }
    }
    out.push_str(",n_used,n_failed\n");

    let mut keys: Vec<(usize, String)> = Vec::new();
    for row in &table.rows {
        let key = (row.model_id, row.target.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    for (model, target) in keys {
        out.push_str(&format!("{model},{target}"));
        let cells: Vec<Option<&warpanova::simulation::BenchRow>> =
            estimators.iter().map(|&e| table.cell(model, &target, e)).collect();
        for metric in 0..3 {
            for cell in &cells {
                match cell {
                    Some(c) => {
                        let v = match metric {
                            0 => c.metrics.bias,
                            1 => c.metrics.sd,
                            _ => c.metrics.rmse,
                        };
                        out.push_str(&format!(",{}", fmt(v)));
                    }
                    None => out.push(','),
                }
            }
        }
        let used = cells.iter().flatten().map(|c| c.n_used).max().unwrap_or(0);
        let failed: usize = cells.iter().flatten().map(|c| c.n_failed).sum();
        out.push_str(&format!(",{used},{failed}\n"));
    }
    out
}

/// Reproducibility manifest: the configuration echo that makes a run exactly
/// repeatable.
#[derive(Serialize)]
pub struct Manifest<C: Serialize> {
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub threads: usize,
    pub config: C,
    pub outputs: Vec<String>,
}

pub fn manifest<C: Serialize>(
    command: &str,
    seed: u64,
    threads: usize,
    config: C,
    outputs: &[&str],
) -> Manifest<C> {
    Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        seed,
        threads,
        config,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    }
}
