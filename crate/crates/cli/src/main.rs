//! Command-line front end: data ingestion, fitting, simulation, the
//! estimator benchmark, and machine-readable reports.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
//! Every run writes a manifest echoing the configuration and seed, and all
//! errors are also emitted as JSON diagnostics.

mod ingest;
mod outputs;
mod schema;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use warpanova::estimation::{
    fit_common_anova, fit_two_step, fit_warped_anova, FitConfig, McSchedule,
};
use warpanova::inference::{anova_f_test, bootstrap_ratios, variance_ratio_report, FTest};
use warpanova::simulation::{
    generate_replication, make_sim_model, run_benchmark, BenchmarkConfig,
};
use warpanova::Estimator;

const REPORT_SCHEMA: &str = include_str!("../../../docs/report.schema.json");

#[derive(Parser)]
#[command(name = "warpanova", version, about = "Warped functional ANOVA: fitting, simulation and inference")]
struct Cli {
    /// Worker threads (default: machine parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a long-format CSV dataset.
    Fit(FitArgs),
    /// Draw a dataset from one of the ten benchmark generators.
    Simulate(SimulateArgs),
    /// Run the estimator comparison benchmark.
    Benchmark(BenchmarkArgs),
    /// Validate a fit report against the shipped schema and summarize it.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
enum EstimatorArg {
    Ml,
    Common,
    TwoStep,
}

impl From<EstimatorArg> for Estimator {
    fn from(e: EstimatorArg) -> Estimator {
        match e {
            EstimatorArg::Ml => Estimator::MaxLik,
            EstimatorArg::Common => Estimator::Common,
            EstimatorArg::TwoStep => Estimator::TwoStep,
        }
    }
}

#[derive(Args, Serialize)]
struct FitArgs {
    /// Input CSV with columns group_id, subject_id, t, y.
    #[arg(long)]
    input: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Group-factor amplitude components.
    #[arg(short = 'p', long = "group-components", default_value_t = 1)]
    p: usize,
    /// Residual-term amplitude components.
    #[arg(short = 'q', long = "subject-components", default_value_t = 1)]
    q: usize,
    /// Comma-separated warping knots; omit to disable warping.
    #[arg(long, value_delimiter = ',')]
    tau0: Vec<f64>,
    /// Interior knots of the amplitude spline basis.
    #[arg(long, default_value_t = 10)]
    basis_knots: usize,
    #[arg(long, default_value_t = 3)]
    degree: usize,
    #[arg(long, default_value_t = 200)]
    em_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    em_tol: f64,
    /// Initial Monte Carlo sample size of the E-step schedule.
    #[arg(long, default_value_t = 100)]
    mc_size: usize,
    /// Penalty weight on tr(Sigma) + tr(Omega).
    #[arg(long, default_value_t = 0.0)]
    penalty: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fit log-transformed responses.
    #[arg(long)]
    log_y: bool,
    /// Rescale each subject's grid so all trajectories end at the median
    /// endpoint.
    #[arg(long)]
    rescale_endpoints: bool,
    #[arg(long, value_enum, default_value_t = EstimatorArg::Ml)]
    estimator: EstimatorArg,
    /// Bootstrap replicates for the variance ratios (0 disables).
    #[arg(long, default_value_t = 0)]
    bootstrap: usize,
    /// Confidence level for the variance-ratio intervals.
    #[arg(long, default_value_t = 0.90)]
    level: f64,
    /// Grid density of the emitted fitted-curve and warp files.
    #[arg(long, default_value_t = 200)]
    curve_grid: usize,
}

#[derive(Args, Serialize)]
struct SimulateArgs {
    /// Benchmark generator id (1-10).
    #[arg(long)]
    model: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Override the generator's group count.
    #[arg(long)]
    groups: Option<usize>,
    /// Override the generator's subjects per group.
    #[arg(long)]
    subjects: Option<usize>,
    /// Override the generator's grid size.
    #[arg(long)]
    points: Option<usize>,
}

#[derive(Args, Serialize)]
struct BenchmarkArgs {
    /// Comma-separated model ids.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 3, 4])]
    models: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    reps: usize,
    /// Comma-separated estimators (ml, common, two-step).
    #[arg(long, value_enum, value_delimiter = ',',
          default_values_t = vec![EstimatorArg::Common, EstimatorArg::TwoStep, EstimatorArg::Ml])]
    estimators: Vec<EstimatorArg>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    em_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    em_tol: f64,
    #[arg(long, default_value_t = 100)]
    mc_size: usize,
    /// Cap of the Monte Carlo schedule.
    #[arg(long, default_value_t = 1600)]
    mc_cap: usize,
    /// Dense grid used by the error metrics.
    #[arg(long, default_value_t = 2000)]
    grid: usize,
    /// Additionally report metrics with the literal inner-product sign
    /// correction.
    #[arg(long)]
    paper_literal: bool,
}

#[derive(Args, Serialize)]
struct ReportArgs {
    /// A fit output directory or a report.json path.
    #[arg(long)]
    input: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    if rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().is_err() {
        // Pool already built (only possible in tests); keep going.
    }

    let (result, out_dir) = match &cli.command {
        Command::Fit(args) => (run_fit(args, threads), Some(args.out.clone())),
        Command::Simulate(args) => (run_simulate(args, threads), Some(args.out.clone())),
        Command::Benchmark(args) => (run_benchmark_cmd(args, threads), Some(args.out.clone())),
        Command::Report(args) => (run_report(args), None),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (kind, code) = classify(&err);
            let diag = serde_json::json!({
                "error": { "kind": kind, "message": err.to_string() }
            });
            eprintln!("{diag}");
            if let Some(dir) = out_dir {
                if dir.is_dir() {
                    let _ = outputs::write_json(&dir.join("error.json"), &diag);
                }
            }
            ExitCode::from(code)
        }
    }
}

fn classify(err: &warpanova::Error) -> (&'static str, u8) {
    use warpanova::Error::*;
    match err {
        InvalidArgument(_) => ("usage", 2),
        Parse { .. } => ("data", 3),
        Domain(_) => ("data", 3),
        Computation(_) => ("numerical", 4),
        Diagnostics(_) => ("numerical", 4),
    }
}

fn ensure_out_dir(path: &Path) -> warpanova::Result<()> {
    std::fs::create_dir_all(path)
        .map_err(|e| warpanova::Error::invalid(format!("cannot create {}: {e}", path.display())))
}

fn fit_config_from(args: &FitArgs) -> FitConfig {
    FitConfig {
        n_group_components: args.p,
        n_subject_components: args.q,
        warp_knots: args.tau0.clone(),
        basis_degree: args.degree,
        basis_interior_knots: args.basis_knots,
        em_max_iter: args.em_iters,
        em_tol: args.em_tol,
        mc_schedule: McSchedule { initial: args.mc_size, ..McSchedule::default() },
        penalty: args.penalty,
        seed: args.seed,
        ..FitConfig::default()
    }
}

fn run_fit(args: &FitArgs, threads: usize) -> warpanova::Result<()> {
    ensure_out_dir(&args.out)?;
    let options = ingest::IngestOptions {
        log_y: args.log_y,
        rescale_endpoints: args.rescale_endpoints,
    };
    let ingested = ingest::ingest_csv(&args.input, options)?;
    let config = fit_config_from(args);

    let fit = match args.estimator {
        EstimatorArg::Ml => fit_warped_anova(&ingested.data, &config)?,
        EstimatorArg::Common => fit_common_anova(&ingested.data, &config)?,
        EstimatorArg::TwoStep => fit_two_step(&ingested.data, &config)?,
    };

    // Ratio inference needs enough groups for the empirical information
    // matrices; degrade to a ratio-free report instead of failing the fit.
    let ratios = match variance_ratio_report(&fit, args.level) {
        Ok(r) => r,
        Err(warpanova::Error::InvalidArgument(msg)) => warpanova::VarianceRatioReport {
            h_amplitude: None,
            h_warp: None,
            n_groups: ingested.data.n_groups(),
            level: args.level,
            warnings: vec![format!("variance-ratio inference skipped: {msg}")],
        },
        Err(other) => return Err(other),
    };

    // Classical F tests on the predicted random effects: one per warp
    // coordinate and one per shared amplitude component.
    let mut f_tests: Vec<(String, FTest)> = Vec::new();
    for k in 0..fit.params.r() {
        let groups: Vec<Vec<f64>> = fit
            .predicted
            .theta
            .iter()
            .map(|g| g.iter().map(|th| th[k]).collect())
            .collect();
        if let Ok(t) = anova_f_test(&groups) {
            f_tests.push((format!("warp_theta_{}", k + 1), t));
        }
    }
    for k in 0..fit.params.p().min(fit.params.q()) {
        let groups: Vec<Vec<f64>> = fit
            .predicted
            .u
            .iter()
            .zip(&fit.predicted.v)
            .map(|(u, vs)| vs.iter().map(|v| u[k] + v[k]).collect())
            .collect();
        if let Ok(t) = anova_f_test(&groups) {
            f_tests.push((format!("amplitude_score_{}", k + 1), t));
        }
    }

    let bootstrap = if args.bootstrap > 0 {
        Some(bootstrap_ratios(&ingested.data, &config, args.bootstrap, args.seed)?)
    } else {
        None
    };

    let report = outputs::build_report(
        &fit,
        &ratios,
        f_tests,
        bootstrap.as_ref(),
        args.log_y,
        args.rescale_endpoints,
    );

    outputs::write_json(&args.out.join("params.json"), &fit.params)?;
    outputs::write_json(&args.out.join("report.json"), &report)?;
    outputs::write_file(
        &args.out.join("fitted_curves.csv"),
        &outputs::fitted_curves_csv(&fit, &ingested.group_ids, &ingested.subject_ids, args.curve_grid)?,
    )?;
    outputs::write_file(
        &args.out.join("warps.csv"),
        &outputs::warps_csv(&fit, &ingested.group_ids, &ingested.subject_ids, args.curve_grid)?,
    )?;
    outputs::write_json(
        &args.out.join("manifest.json"),
        &outputs::manifest(
            "fit",
            args.seed,
            threads,
            args,
            &["params.json", "report.json", "fitted_curves.csv", "warps.csv"],
        ),
    )?;

    // Validate our own report against the shipped schema before declaring
    // success.
    let schema: serde_json::Value = serde_json::from_str(REPORT_SCHEMA)
        .map_err(|e| warpanova::Error::computation(format!("bad embedded schema: {e}")))?;
    let report_value = serde_json::to_value(&report)
        .map_err(|e| warpanova::Error::computation(e.to_string()))?;
    let violations = schema::validate(&schema, &report_value);
    if !violations.is_empty() {
        return Err(warpanova::Error::computation(format!(
            "report failed schema validation: {}",
            violations.join("; ")
        )));
    }
    println!("fit written to {}", args.out.display());
    Ok(())
}

fn run_simulate(args: &SimulateArgs, threads: usize) -> warpanova::Result<()> {
    ensure_out_dir(&args.out)?;
    let mut spec = make_sim_model(args.model)?;
    if let Some(g) = args.groups {
        spec.n_groups = g;
    }
    if let Some(s) = args.subjects {
        spec.subjects_per_group = s;
    }
    if let Some(p) = args.points {
        spec.n_points = p;
    }
    let (data, _) = generate_replication(&spec, args.seed)?;
    outputs::write_file(&args.out.join("data.csv"), &outputs::data_csv(&data))?;
    outputs::write_json(
        &args.out.join("manifest.json"),
        &outputs::manifest("simulate", args.seed, threads, args, &["data.csv"]),
    )?;
    println!("dataset written to {}", args.out.display());
    Ok(())
}

fn run_benchmark_cmd(args: &BenchmarkArgs, threads: usize) -> warpanova::Result<()> {
    ensure_out_dir(&args.out)?;
    let estimators: Vec<Estimator> = args.estimators.iter().map(|&e| e.into()).collect();
    let config = BenchmarkConfig {
        model_ids: args.models.clone(),
        n_reps: args.reps,
        estimators: estimators.clone(),
        seed: args.seed,
        em_max_iter: args.em_iters,
        em_tol: args.em_tol,
        mc_schedule: McSchedule {
            initial: args.mc_size,
            cap: args.mc_cap,
            ..McSchedule::default()
        },
        grid_points: args.grid,
        paper_literal: args.paper_literal,
    };
    let table = run_benchmark(&config)?;
    outputs::write_file(
        &args.out.join("benchmark_table.csv"),
        &outputs::benchmark_csv(&table, &estimators),
    )?;
    let failures: Vec<serde_json::Value> = table
        .failures
        .iter()
        .map(|(model, est, rep, msg)| {
            serde_json::json!({
                "model": model, "estimator": est.label(), "replication": rep, "message": msg
            })
        })
        .collect();
    outputs::write_json(&args.out.join("failures.json"), &failures)?;
    outputs::write_json(
        &args.out.join("manifest.json"),
        &outputs::manifest(
            "benchmark",
            args.seed,
            threads,
            args,
            &["benchmark_table.csv", "failures.json"],
        ),
    )?;
    println!("benchmark written to {}", args.out.display());
    Ok(())
}

fn run_report(args: &ReportArgs) -> warpanova::Result<()> {
    let path = if args.input.is_dir() { args.input.join("report.json") } else { args.input.clone() };
    let raw = std::fs::read_to_string(&path).map_err(|e| warpanova::Error::Parse {
        line: 0,
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    let value: serde_json::Value = serde_json::from_str(&raw)
        .map_err(|e| warpanova::Error::Parse { line: 0, message: format!("invalid JSON: {e}") })?;
    let schema: serde_json::Value = serde_json::from_str(REPORT_SCHEMA)
        .map_err(|e| warpanova::Error::computation(format!("bad embedded schema: {e}")))?;
    let violations = schema::validate(&schema, &value);
    if !violations.is_empty() {
        return Err(warpanova::Error::Parse {
            line: 0,
            message: format!("report does not match the schema: {}", violations.join("; ")),
        });
    }

    println!("estimator: {}", value["estimator"].as_str().unwrap_or("?"));
    println!(
        "converged: {} after {} iterations",
        value["converged"], value["iterations"]
    );
    println!("loglik: {} (se {})", value["loglik"], value["loglik_se"]);
    for (name, key) in [("amplitude", "h_amplitude"), ("warp", "h_warp")] {
        if value[key].is_object() {
            println!(
                "h_{name}: {} in [{}, {}] at level {}",
                value[key]["point"], value[key]["ci_lower"], value[key]["ci_upper"], value[key]["level"]
            );
        }
    }
    if let Some(tests) = value["f_tests"].as_array() {
        for t in tests {
            println!(
                "F test {}: F = {} on ({}, {}) df, p = {}",
                t["label"], t["statistic"], t["df_between"], t["df_within"], t["p_value"]
            );
        }
    }
    if let Some(warnings) = value["warnings"].as_array() {
        for w in warnings {
            println!("warning: {}", w.as_str().unwrap_or(""));
        }
    }
    Ok(())
}
