//! Command-line front end. Every subcommand is a thin wrapper over the
//! library: artifacts are plain CSV/JSON/SVG files, and all numerics live
//! in the library modules.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use scalefit::bootstrap::{bootstrap_fit, bootstrap_fit_with_warm, samples_from_csv_path,
    BootstrapResult};
use scalefit::extract::{extract_figure, extract_figure_path, ExtractConfig, FigureLayout};
use scalefit::fitter::{fit, FitResult};
use scalefit::model::{Aggregation, Dataset, FitConfig, InitGrid, DEFAULT_FLOP_PER_PARAM_TOKEN};
use scalefit::objective::residual_report;
use scalefit::pipeline::{run_pipeline, PipelineConfig, ZTestSet, DEFAULT_EVAL_COMPUTE,
    DEFAULT_SEED};
use scalefit::plot::policy_band_svg;
use scalefit::policy::{log_spaced_grid, optimal_allocation, policy_band, policy_curve,
    policy_exponents, DEFAULT_COVERAGE, DEFAULT_GRID_POINTS};
use scalefit::reference::{HOFFMANN_REPORTED, HOFFMANN_UNROUNDED, REFERENCE_FIGURE_SVG};
use scalefit::report::render_report_to_path;
use scalefit::stats::{chi2_equality_test, likelihood_ratio_test, per_parameter_z_test,
    sigma_profile_from_residuals, TestReport};
use scalefit::{Error, Result};

#[derive(Parser)]
#[command(
    name = "scalefit",
    version,
    about = "Scaling-law fitting, uncertainty, and compute-optimal allocation",
    propagate_version = true
)]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalOpts {
    /// Seed for resampling steps.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Configuration file (TOML or JSON). Read by extract (extraction
    /// options), fit/bootstrap/lrt (fit options), and pipeline (run
    /// options); other subcommands ignore it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Directory for output artifacts (default: current directory;
    /// pipeline defaults to ./scalefit-run).
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Screen out runs with a low tokens-per-parameter ratio (the default).
    #[arg(long, global = true, conflicts_with = "keep_outliers")]
    drop_outliers: bool,
    /// Keep every observation.
    #[arg(long, global = true)]
    keep_outliers: bool,
    /// How per-run Huber losses combine into the objective.
    #[arg(long, global = true, value_enum, value_name = "sum|mean")]
    aggregation: Option<AggregationArg>,
    /// Strip nondeterministic content from outputs. Accepted for
    /// compatibility; outputs are always reproducible.
    #[arg(long, global = true)]
    reproducible: bool,
}

#[derive(Copy, Clone, ValueEnum)]
enum AggregationArg {
    Sum,
    Mean,
}

impl From<AggregationArg> for Aggregation {
    fn from(a: AggregationArg) -> Self {
        match a {
            AggregationArg::Sum => Aggregation::Sum,
            AggregationArg::Mean => Aggregation::Mean,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Digitize an SVG scatter figure into a dataset CSV plus diagnostics.
    Extract {
        /// SVG figure to digitize; omitted = the bundled reference figure.
        figure: Option<PathBuf>,
    },
    /// Fit the scaling law to a dataset CSV; writes fit.json.
    Fit {
        /// Dataset CSV (header: source_id,n_params,flop,tokens,loss).
        dataset: PathBuf,
    },
    /// Bootstrap a fit for parameter uncertainty; writes bootstrap.json
    /// and covariance.csv.
    Bootstrap {
        /// Dataset CSV to resample.
        dataset: PathBuf,
        /// Number of bootstrap resamples.
        #[arg(long, default_value_t = 4000)]
        resamples: usize,
        /// Warm-start from this fit artifact instead of refitting first.
        #[arg(long, value_name = "PATH")]
        fit: Option<PathBuf>,
        /// Also write the raw resampled parameter vectors as CSV.
        #[arg(long)]
        samples: bool,
    },
    /// Joint and per-parameter equality tests of a fit against the
    /// unrounded Hoffmann et al. parameters; writes tests.json.
    TestParams {
        /// Fit artifact (fit.json).
        #[arg(long, value_name = "PATH")]
        fit: PathBuf,
        /// Bootstrap artifact (bootstrap.json) providing the covariance.
        #[arg(long, value_name = "PATH")]
        bootstrap: PathBuf,
    },
    /// Likelihood-ratio test of the Hoffmann et al. parameters against a
    /// fit on the same dataset; writes lrt.json.
    Lrt {
        /// Dataset CSV the log-likelihoods are evaluated on.
        #[arg(long, value_name = "PATH")]
        dataset: PathBuf,
        /// Fit artifact (fit.json) for the alternative hypothesis.
        #[arg(long, value_name = "PATH")]
        fit: PathBuf,
    },
    /// Compute-optimal allocation curve, with bootstrap bands when
    /// samples are supplied; writes policy_curve.csv and policy_band.svg.
    Policy {
        /// Fit artifact (fit.json) providing the parameters.
        #[arg(long, value_name = "PATH")]
        fit: PathBuf,
        /// Bootstrap artifact (.json) or raw samples file (.csv).
        #[arg(long, value_name = "PATH")]
        bootstrap: Option<PathBuf>,
        /// Low end of the compute grid.
        #[arg(long, value_name = "FLOP", default_value = "1e18")]
        compute_min: f64,
        /// High end of the compute grid.
        #[arg(long, value_name = "FLOP", default_value = "1e28")]
        compute_max: f64,
        /// Log-spaced grid points between the compute bounds.
        #[arg(long, default_value_t = DEFAULT_GRID_POINTS)]
        points: usize,
        /// Pointwise band coverage when bootstrap samples are given.
        #[arg(long, default_value_t = DEFAULT_COVERAGE)]
        coverage: f64,
    },
    /// Render report.md for a finished pipeline run directory.
    Report {
        /// Run directory containing manifest.json (default: scalefit-run).
        run_dir: Option<PathBuf>,
    },
    /// Run the whole analysis (extract, fit, bootstrap, tests, policy,
    /// plots, report) into one run directory with a hash manifest.
    Pipeline {
        /// Figure to extract instead of the bundled one.
        #[arg(long, value_name = "SVG")]
        figure: Option<PathBuf>,
        /// Ready-made dataset CSV; skips extraction.
        #[arg(long, value_name = "CSV", conflicts_with = "figure")]
        dataset: Option<PathBuf>,
        /// Bootstrap resamples (0 skips the bootstrap).
        #[arg(long)]
        resamples: Option<usize>,
    },
}

/// Fit options file: every field optional, defaulting to the library's
/// fit configuration. Unknown keys are rejected.
#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FitFileConfig {
    delta: f64,
    init_grid: InitGrid,
    aggregation: Aggregation,
    grad_tolerance: f64,
    relative_change_tolerance: f64,
    absolute_change_stop: Option<f64>,
    max_iterations: usize,
    drop_outliers: bool,
    outlier_threshold: f64,
}

impl Default for FitFileConfig {
    fn default() -> Self {
        let c = FitConfig::default();
        Self {
            delta: c.delta,
            init_grid: c.init_grid,
            aggregation: c.aggregation,
            grad_tolerance: c.grad_tolerance,
            relative_change_tolerance: c.relative_change_tolerance,
            absolute_change_stop: c.absolute_change_stop,
            max_iterations: c.max_iterations,
            drop_outliers: c.drop_outliers,
            outlier_threshold: c.outlier_threshold,
        }
    }
}

impl From<FitFileConfig> for FitConfig {
    fn from(f: FitFileConfig) -> Self {
        Self {
            delta: f.delta,
            init_grid: f.init_grid,
            aggregation: f.aggregation,
            grad_tolerance: f.grad_tolerance,
            relative_change_tolerance: f.relative_change_tolerance,
            absolute_change_stop: f.absolute_change_stop,
            max_iterations: f.max_iterations,
            drop_outliers: f.drop_outliers,
            outlier_threshold: f.outlier_threshold,
        }
    }
}

fn load_fit_file_config(path: &Path) -> Result<FitConfig> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parsed: FitFileConfig = match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text)?,
        Some("json") => serde_json::from_str(&text)?,
        other => {
            return Err(Error::BadInput(format!(
                "config must be .toml or .json, got extension {other:?} for {}",
                path.display()
            )))
        }
    };
    let config: FitConfig = parsed.into();
    config.validate()?;
    Ok(config)
}

fn fit_config(global: &GlobalOpts) -> Result<FitConfig> {
    let mut config = match &global.config {
        Some(path) => load_fit_file_config(path)?,
        None => FitConfig::default(),
    };
    if global.keep_outliers {
        config.drop_outliers = false;
    }
    if global.drop_outliers {
        config.drop_outliers = true;
    }
    if let Some(aggregation) = global.aggregation {
        config.aggregation = aggregation.into();
    }
    Ok(config)
}

fn artifact_dir(global: &GlobalOpts) -> Result<PathBuf> {
    let dir = global.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn print_fit_table(result: &FitResult) -> Result<()> {
    let p = &result.params;
    let a_policy = policy_exponents(p)?.a_policy;
    println!("{:<10} {:>12}", "parameter", "estimate");
    println!("{:<10} {:>12.4}", "E", p.e);
    println!("{:<10} {:>12.1}", "A", p.a);
    println!("{:<10} {:>12.1}", "B", p.b);
    println!("{:<10} {:>12.4}", "alpha", p.alpha);
    println!("{:<10} {:>12.4}", "beta", p.beta);
    println!("{:<10} {:>12.4}", "a_policy", a_policy);
    println!(
        "objective {:.6e} on {} observations ({} outliers dropped, {}/{} starts converged)",
        result.objective,
        result.n_observations,
        result.dropped_outliers,
        result.converged_runs,
        result.total_runs
    );
    Ok(())
}

fn cmd_extract(global: &GlobalOpts, figure: Option<PathBuf>) -> Result<()> {
    let config = match &global.config {
        Some(path) => ExtractConfig::from_path(path)?,
        None => ExtractConfig::for_layout(&FigureLayout::default()),
    };
    let extraction = match &figure {
        Some(path) => extract_figure_path(path, &config)?,
        None => extract_figure(REFERENCE_FIGURE_SVG, &config)?,
    };
    let dir = artifact_dir(global)?;
    let csv = dir.join("dataset.csv");
    extraction.dataset.to_csv_path(&csv)?;
    extraction.report.to_json_path(&dir.join("extraction_report.json"))?;
    let r = &extraction.report;
    println!("extracted {} points -> {}", r.n_points, csv.display());
    println!(
        "axis fit residuals: x {:.3e}, y {:.3e}; worst color match {:.4}",
        r.x_axis_residual, r.y_axis_residual, r.max_color_distance
    );
    Ok(())
}

fn cmd_fit(global: &GlobalOpts, dataset: &Path) -> Result<()> {
    let data = Dataset::from_csv_path(dataset)?;
    let config = fit_config(global)?;
    let result = fit(&data, &config)?;
    let dir = artifact_dir(global)?;
    let path = dir.join("fit.json");
    result.to_json_path(&path)?;
    print_fit_table(&result)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_bootstrap(
    global: &GlobalOpts,
    dataset: &Path,
    resamples: usize,
    fit_path: Option<&Path>,
    samples: bool,
) -> Result<()> {
    let data = Dataset::from_csv_path(dataset)?;
    let config = fit_config(global)?;
    let seed = global.seed.unwrap_or(DEFAULT_SEED);
    let result = match fit_path {
        Some(path) => {
            let warm = FitResult::from_json_path(path)?;
            bootstrap_fit_with_warm(&data, &config, resamples, seed, &warm.log_params)?
        }
        None => bootstrap_fit(&data, &config, resamples, seed)?,
    };
    let dir = artifact_dir(global)?;
    result.to_json_path(dir.join("bootstrap.json"))?;
    result.covariance_to_csv_path(dir.join("covariance.csv"))?;
    if samples {
        result.samples_to_csv_path(dir.join("bootstrap_samples.csv"))?;
    }
    println!("{:<10} {:>12}", "quantity", "SE");
    for (name, se) in [
        ("log_a", result.standard_errors[0]),
        ("log_b", result.standard_errors[1]),
        ("log_e", result.standard_errors[2]),
        ("alpha", result.standard_errors[3]),
        ("beta", result.standard_errors[4]),
        ("a_policy", result.a_policy.se),
    ] {
        println!("{name:<10} {se:>12.4}");
    }
    println!(
        "a_policy {:.4} +/- {:.4} from {} resamples (seed {}, {} excluded)",
        result.a_policy.point,
        result.a_policy.se,
        result.samples.len(),
        result.seed,
        result.excluded_resamples
    );
    println!("wrote {}", dir.join("bootstrap.json").display());
    Ok(())
}

#[derive(Serialize)]
struct EqualityTests {
    chi2: TestReport,
    z: ZTestSet,
}

fn cmd_test_params(global: &GlobalOpts, fit_path: &Path, bootstrap_path: &Path) -> Result<()> {
    let fit_result = FitResult::from_json_path(fit_path)?;
    let boot = BootstrapResult::from_json_path(bootstrap_path)?;
    let target = HOFFMANN_UNROUNDED;
    let chi2 = chi2_equality_test(
        &fit_result.log_params.as_vector(),
        &target.to_log().as_vector(),
        &boot.covariance,
    )?;
    let p = &fit_result.params;
    let se = &boot.standard_errors;
    let z = ZTestSet {
        e: per_parameter_z_test(target.e, p.e, p.e * se[2])?,
        alpha: per_parameter_z_test(target.alpha, p.alpha, se[3])?,
        beta: per_parameter_z_test(target.beta, p.beta, se[4])?,
    };
    println!(
        "chi-squared = {:.2} ({} dof), p = {:.3e}",
        chi2.statistic,
        chi2.dof.unwrap_or(0),
        chi2.p_value
    );
    for (name, t) in [("E", &z.e), ("alpha", &z.alpha), ("beta", &z.beta)] {
        println!("z[{name}] = {:+.2}, p = {:.3e}", t.statistic, t.p_value);
    }
    let dir = artifact_dir(global)?;
    let path = dir.join("tests.json");
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &EqualityTests { chi2, z })?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_lrt(global: &GlobalOpts, dataset: &Path, fit_path: &Path) -> Result<()> {
    let data = Dataset::from_csv_path(dataset)?;
    let config = fit_config(global)?;
    let fit_result = FitResult::from_json_path(fit_path)?;
    let working = if config.drop_outliers {
        data.partition_outliers(config.outlier_threshold).0
    } else {
        data.clone()
    };
    let ll = |params: &scalefit::model::LogSpaceParams| -> Result<f64> {
        let report = residual_report(params, &working, &config)?;
        Ok(sigma_profile_from_residuals(&report.residuals, config.delta)?.log_likelihood)
    };
    let ll_reported = ll(&HOFFMANN_REPORTED.to_log())?;
    let ll_unrounded = ll(&HOFFMANN_UNROUNDED.to_log())?;
    let ll_fit = ll(&fit_result.log_params)?;
    let test = likelihood_ratio_test(ll_unrounded, ll_fit, 5)?;
    println!("{:<28} {:>12}", "parameters", "log-lik");
    println!("{:<28} {:>12.2}", "Hoffmann et al. as printed", ll_reported);
    println!("{:<28} {:>12.2}", "Hoffmann et al. unrounded", ll_unrounded);
    println!("{:<28} {:>12.2}", "fitted", ll_fit);
    println!(
        "LR statistic {:.2} on {} dof, p = {:.3e} ({} observations)",
        test.statistic,
        test.dof.unwrap_or(0),
        test.p_value,
        working.len()
    );
    let dir = artifact_dir(global)?;
    let path = dir.join("lrt.json");
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &test)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_policy(
    global: &GlobalOpts,
    fit_path: &Path,
    bootstrap_path: Option<&Path>,
    compute_min: f64,
    compute_max: f64,
    points: usize,
    coverage: f64,
) -> Result<()> {
    let fit_result = FitResult::from_json_path(fit_path)?;
    let grid = log_spaced_grid(compute_min, compute_max, points)?;
    let m = DEFAULT_FLOP_PER_PARAM_TOKEN;
    let curve = match bootstrap_path {
        Some(path) => {
            let samples = match path.extension().and_then(|e| e.to_str()) {
                Some("csv") => samples_from_csv_path(path)?,
                _ => BootstrapResult::from_json_path(path)?.samples,
            };
            policy_band(&fit_result.params, &samples, &grid, coverage, m)?
        }
        None => policy_curve(&fit_result.params, &grid, m)?,
    };
    let dir = artifact_dir(global)?;
    let csv = dir.join("policy_curve.csv");
    curve.to_csv_path(&csv)?;
    let svg_path = dir.join("policy_band.svg");
    let svg = policy_band_svg(&curve, "Compute-optimal tokens per parameter")?;
    fs::write(&svg_path, svg).map_err(|e| Error::io(&svg_path, e))?;
    let exponents = policy_exponents(&fit_result.params)?;
    let at_eval = optimal_allocation(&fit_result.params, DEFAULT_EVAL_COMPUTE, m)?;
    println!(
        "N_opt ~ C^{:.4}, D_opt ~ C^{:.4}; at C = {:e}: N = {:.2e}, D = {:.2e} ({:.1} tokens/param)",
        exponents.a_policy,
        exponents.b_policy,
        DEFAULT_EVAL_COMPUTE,
        at_eval.n_opt,
        at_eval.d_opt,
        at_eval.ratio
    );
    println!("wrote {} and {}", csv.display(), svg_path.display());
    Ok(())
}

fn cmd_report(global: &GlobalOpts, run_dir: Option<PathBuf>) -> Result<()> {
    let dir = run_dir
        .or_else(|| global.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("scalefit-run"));
    let path = render_report_to_path(&dir)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_pipeline(
    global: &GlobalOpts,
    figure: Option<PathBuf>,
    dataset: Option<PathBuf>,
    resamples: Option<usize>,
) -> Result<()> {
    let mut config = match &global.config {
        Some(path) => PipelineConfig::from_toml_path(path)?,
        None => PipelineConfig::default(),
    };
    if figure.is_some() {
        config.figure_svg = figure;
        config.dataset_csv = None;
    }
    if dataset.is_some() {
        config.dataset_csv = dataset;
        config.figure_svg = None;
    }
    if let Some(r) = resamples {
        config.resamples = r;
    }
    if let Some(seed) = global.seed {
        config.seed = seed;
    }
    if let Some(aggregation) = global.aggregation {
        config.aggregation = aggregation.into();
    }
    if let Some(dir) = &global.out_dir {
        config.out_dir = Some(dir.clone());
    }
    config.validate()?;
    let manifest = run_pipeline(&config)?;
    let dir = config.out_dir.unwrap_or_else(|| PathBuf::from("scalefit-run"));
    println!("run directory: {}", dir.display());
    for step in &manifest.steps {
        println!("  step {:<12} -> {}", step.name, step.outputs.join(", "));
    }
    println!("  report       -> report.md");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let global = &cli.global;
    match cli.command {
        Command::Extract { figure } => cmd_extract(global, figure),
        Command::Fit { dataset } => cmd_fit(global, &dataset),
        Command::Bootstrap { dataset, resamples, fit, samples } => {
            cmd_bootstrap(global, &dataset, resamples, fit.as_deref(), samples)
        }
        Command::TestParams { fit, bootstrap } => cmd_test_params(global, &fit, &bootstrap),
        Command::Lrt { dataset, fit } => cmd_lrt(global, &dataset, &fit),
        Command::Policy { fit, bootstrap, compute_min, compute_max, points, coverage } => {
            cmd_policy(global, &fit, bootstrap.as_deref(), compute_min, compute_max, points,
                coverage)
        }
        Command::Report { run_dir } => cmd_report(global, run_dir),
        Command::Pipeline { figure, dataset, resamples } => {
            cmd_pipeline(global, figure, dataset, resamples)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(error.exit_code() as u8)
        }
    }
}
