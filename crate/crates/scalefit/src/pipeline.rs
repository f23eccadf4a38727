//! Pipeline orchestration: run the full analysis as a sequence of steps,
//! persist every intermediate result as a flat file in a run directory, and
//! record a manifest of content hashes so the report generator can verify
//! exactly what it is reading.
//!
//! Steps run in dependency order: input (figure extraction, or loading a
//! ready-made dataset CSV), fitting with and without the outlier screen,
//! residual and log-likelihood artifacts, bootstrap resampling, hypothesis
//! tests, allocation policy curves, and plots. A failing step aborts the
//! run with the step named in the error.
//!
//! Everything is deterministic: rerunning with the same inputs and seeds
//! reproduces every artifact byte for byte, which the manifest hashes make
//! checkable.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bootstrap::{bootstrap_fit_with_warm, BootstrapResult};
use crate::error::{Error, Result};
use crate::extract::{extract_figure, ExtractConfig, FigureLayout};
use crate::fitter::{fit, FitResult};
use crate::model::{Aggregation, Dataset, FitConfig, DEFAULT_FLOP_PER_PARAM_TOKEN};
use crate::objective::{residual_report, ResidualReport};
use crate::plot::{policy_band_svg, residual_scatter_svg};
use crate::policy::{
    log_spaced_grid, optimal_allocation, policy_band, policy_curve, policy_exponents, Allocation,
    PolicyCurve, PolicyExponents, PolicyPoint, DEFAULT_COMPUTE_MAX, DEFAULT_COMPUTE_MIN,
    DEFAULT_COVERAGE, DEFAULT_GRID_POINTS,
};
use crate::reference::{REFERENCE_FIGURE_SVG, REFERENCE_SEED};
use crate::stats::{
    chi2_equality_test, likelihood_ratio_test, per_parameter_z_test, rounding_bias,
    sigma_profile_from_residuals, TestReport,
};

/// Compute at which the report quotes tokens-per-parameter allocations,
/// the budget of the 70B-parameter Chinchilla run.
pub const DEFAULT_EVAL_COMPUTE: f64 = 5.88e23;

/// Compute at which the report quotes the bootstrap ratio band.
pub const DEFAULT_BAND_COMPUTE: f64 = 1e26;

/// Default bootstrap resample count.
pub const DEFAULT_RESAMPLES: usize = 4000;

/// Default bootstrap seed.
pub const DEFAULT_SEED: u64 = 2022;

// Artifact file names, relative to the run directory.
pub const FIGURE_SVG: &str = "figure.svg";
pub const DATASET_CSV: &str = "dataset.csv";
pub const EXTRACTION_REPORT_JSON: &str = "extraction_report.json";
pub const FIT_NO_OUTLIERS_JSON: &str = "fit_no_outliers.json";
pub const FIT_WITH_OUTLIERS_JSON: &str = "fit_with_outliers.json";
pub const RESIDUALS_OUR_FIT_CSV: &str = "residuals_our_fit.csv";
pub const RESIDUALS_HOFFMANN_UNROUNDED_CSV: &str = "residuals_hoffmann_unrounded.csv";
pub const RESIDUALS_HOFFMANN_REPORTED_CSV: &str = "residuals_hoffmann_reported.csv";
pub const LOGLIK_JSON: &str = "loglik.json";
pub const BOOTSTRAP_NO_OUTLIERS_JSON: &str = "bootstrap_no_outliers.json";
pub const BOOTSTRAP_WITH_OUTLIERS_JSON: &str = "bootstrap_with_outliers.json";
pub const TESTS_JSON: &str = "tests.json";
pub const POLICY_CURVE_CSV: &str = "policy_curve.csv";
pub const POLICY_JSON: &str = "policy.json";
pub const PLOT_RESIDUALS_OUR_FIT_SVG: &str = "residuals_our_fit.svg";
pub const PLOT_RESIDUALS_REPORTED_SVG: &str = "residuals_hoffmann_reported.svg";
pub const PLOT_POLICY_BAND_SVG: &str = "policy_band.svg";
pub const REPORT_MD: &str = "report.md";
pub const MANIFEST_JSON: &str = "manifest.json";

fn default_seed() -> u64 {
    DEFAULT_SEED
}
fn default_resamples() -> usize {
    DEFAULT_RESAMPLES
}
fn default_aggregation() -> Aggregation {
    Aggregation::Sum
}
fn default_delta() -> f64 {
    1e-3
}
fn default_coverage() -> f64 {
    DEFAULT_COVERAGE
}
fn default_eval_compute() -> f64 {
    DEFAULT_EVAL_COMPUTE
}
fn default_band_compute() -> f64 {
    DEFAULT_BAND_COMPUTE
}
fn default_compute_min() -> f64 {
    DEFAULT_COMPUTE_MIN
}
fn default_compute_max() -> f64 {
    DEFAULT_COMPUTE_MAX
}
fn default_grid_points() -> usize {
    DEFAULT_GRID_POINTS
}

/// Everything a pipeline run depends on. Loadable from a TOML file where
/// every field is optional; the defaults reproduce the bundled analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Scatter figure to extract. When neither this nor `dataset_csv` is
    /// set, the bundled reference figure is used.
    #[serde(default)]
    pub figure_svg: Option<PathBuf>,
    /// Ready-made dataset; skips the extraction step entirely.
    #[serde(default)]
    pub dataset_csv: Option<PathBuf>,
    /// Extraction options for `figure_svg`, as a TOML or JSON file.
    /// When unset, the options for figures rendered by this tool apply.
    #[serde(default)]
    pub extract_config: Option<PathBuf>,
    /// Run directory. Often supplied on the command line instead.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Bootstrap resamples; 0 skips the bootstrap, tests that need a
    /// covariance, and the policy bands.
    #[serde(default = "default_resamples")]
    pub resamples: usize,
    #[serde(default = "default_aggregation")]
    pub aggregation: Aggregation,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Optional loose stopping rule, passed through to the fitter.
    #[serde(default)]
    pub absolute_change_stop: Option<f64>,
    #[serde(default = "default_coverage")]
    pub coverage: f64,
    #[serde(default = "default_eval_compute")]
    pub eval_compute: f64,
    #[serde(default = "default_band_compute")]
    pub band_compute: f64,
    #[serde(default = "default_compute_min")]
    pub compute_min: f64,
    #[serde(default = "default_compute_max")]
    pub compute_max: f64,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            figure_svg: None,
            dataset_csv: None,
            extract_config: None,
            out_dir: None,
            seed: default_seed(),
            resamples: default_resamples(),
            aggregation: default_aggregation(),
            delta: default_delta(),
            absolute_change_stop: None,
            coverage: default_coverage(),
            eval_compute: default_eval_compute(),
            band_compute: default_band_compute(),
            compute_min: default_compute_min(),
            compute_max: default_compute_max(),
            grid_points: default_grid_points(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: Self = toml::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.figure_svg.is_some() && self.dataset_csv.is_some() {
            return Err(Error::BadInput(
                "set figure_svg or dataset_csv, not both".into(),
            ));
        }
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(Error::BadInput(format!("delta must be positive, got {}", self.delta)));
        }
        if self.resamples != 0 && self.resamples < 100 {
            return Err(Error::BadInput(format!(
                "resamples must be 0 (skip) or at least 100 for quantile bands, got {}",
                self.resamples
            )));
        }
        if !(self.coverage > 0.0 && self.coverage < 1.0) {
            return Err(Error::BadInput(format!(
                "coverage must be in (0, 1), got {}",
                self.coverage
            )));
        }
        if self.grid_points < 2 {
            return Err(Error::BadInput(format!(
                "grid_points must be at least 2, got {}",
                self.grid_points
            )));
        }
        for (name, v) in [
            ("eval_compute", self.eval_compute),
            ("band_compute", self.band_compute),
            ("compute_min", self.compute_min),
            ("compute_max", self.compute_max),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::BadInput(format!("{name} must be positive, got {v}")));
            }
        }
        if self.compute_min >= self.compute_max {
            return Err(Error::BadInput(format!(
                "compute_min must be below compute_max, got [{}, {}]",
                self.compute_min, self.compute_max
            )));
        }
        Ok(())
    }

    /// Fit configuration for the screened (headline) fit.
    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            delta: self.delta,
            aggregation: self.aggregation,
            absolute_change_stop: self.absolute_change_stop,
            ..FitConfig::default()
        }
    }

    /// Same configuration with the outlier screen disabled.
    pub fn fit_config_keep_outliers(&self) -> FitConfig {
        FitConfig { drop_outliers: false, ..self.fit_config() }
    }
}

/// One executed step: its name and the files it read and wrote. Input
/// paths outside the run directory are recorded as given; outputs are
/// always run-directory relative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub name: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

/// Record of a pipeline run: tool version, effective configuration, seeds,
/// executed steps, and a sha256 per artifact.
///
/// The manifest deliberately excludes the run directory path and any
/// timestamps, so runs with identical inputs produce identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub tool_version: String,
    pub config: PipelineConfig,
    /// Named seeds that influenced artifact content.
    pub seeds: BTreeMap<String, u64>,
    pub steps: Vec<StepRecord>,
    /// Artifact path (relative to the run directory) to sha256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
}

impl PipelineManifest {
    pub fn to_json_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn from_json_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }

    /// Check that every recorded artifact still exists and hash-matches.
    pub fn verify(&self, run_dir: &Path) -> Result<()> {
        for (name, expected) in &self.artifacts {
            let path = run_dir.join(name);
            if !path.exists() {
                return Err(Error::MissingArtifact(path.display().to_string()));
            }
            let actual = sha256_file(&path)?;
            if &actual != expected {
                return Err(Error::BadInput(format!(
                    "artifact {name} does not match its manifest hash \
                     (expected {expected}, found {actual}); was it edited after the run?"
                )));
            }
        }
        Ok(())
    }

    /// Whether the run produced bootstrap artifacts.
    pub fn has_bootstrap(&self) -> bool {
        self.artifacts.contains_key(BOOTSTRAP_NO_OUTLIERS_JSON)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Ladder of profile log-likelihoods for one observation subset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LadderColumn {
    pub n_observations: usize,
    /// Hoffmann et al. parameters as printed (rounded exponents).
    pub reported: f64,
    /// Hoffmann et al. parameters at full precision.
    pub unrounded: f64,
    /// The corresponding fit from this run.
    pub our_fit: f64,
}

/// Log-likelihood artifact: both ladder columns, the headline gaps, and
/// the likelihood-ratio test of the unrounded parameters against our fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoglikSummary {
    pub delta: f64,
    pub no_outliers: LadderColumn,
    pub with_outliers: LadderColumn,
    /// `unrounded - reported` in the no-outlier column.
    pub gap_unrounded_over_reported: f64,
    /// `our_fit - unrounded` in the no-outlier column.
    pub gap_our_fit_over_unrounded: f64,
    pub lrt: TestReport,
}

impl LoglikSummary {
    pub fn from_json_path(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }
}

/// Per-parameter z-tests of a fit against the unrounded Hoffmann et al.
/// values, for the three parameters the comparison turns on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZTestSet {
    pub e: TestReport,
    pub alpha: TestReport,
    pub beta: TestReport,
}

/// The rounding-bias computation on the data term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundingBiasReport {
    pub beta_true: f64,
    pub beta_rounded: f64,
    pub tokens: f64,
    /// Relative inflation of the data term `B / D^beta` at `tokens`.
    pub relative_bias: f64,
}

/// Hypothesis-test artifact. Test entries that need a bootstrap
/// covariance are `None` when the run skipped the bootstrap.
///
/// The Hoffmann et al. parameter values the tests compare against are
/// snapshotted here so the report can source them from this file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestsSummary {
    pub chi2_no_outliers: Option<TestReport>,
    pub chi2_with_outliers: Option<TestReport>,
    pub z_no_outliers: Option<ZTestSet>,
    pub z_with_outliers: Option<ZTestSet>,
    pub rounding_bias: RoundingBiasReport,
    pub hoffmann_unrounded: crate::model::ScalingLawParams,
    pub hoffmann_reported: crate::model::ScalingLawParams,
}

impl TestsSummary {
    pub fn from_json_path(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }
}

/// Headline allocation numbers for the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub eval_compute: f64,
    pub our_allocation: Allocation,
    pub hoffmann_allocation: Allocation,
    pub our_exponents: PolicyExponents,
    /// Exponents of the fit without the outlier screen.
    pub with_outlier_exponents: PolicyExponents,
    pub hoffmann_exponents: PolicyExponents,
    pub band_compute: f64,
    pub coverage: f64,
    /// Ratio band at `band_compute`; `None` without a bootstrap.
    pub band: Option<PolicyPoint>,
}

impl PolicySummary {
    pub fn from_json_path(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), value)?;
    Ok(())
}

struct Run {
    dir: PathBuf,
    steps: Vec<StepRecord>,
    artifacts: BTreeMap<String, String>,
}

impl Run {
    fn record(&mut self, name: &str) -> Result<()> {
        let hash = sha256_file(&self.dir.join(name))?;
        self.artifacts.insert(name.to_string(), hash);
        Ok(())
    }

    fn step(&mut self, name: &str, inputs: Vec<String>, outputs: Vec<String>) {
        self.steps.push(StepRecord {
            name: name.to_string(),
            inputs,
            outputs: outputs.clone(),
        });
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

/// Execute the pipeline described by `config` and write all artifacts plus
/// `manifest.json` into the run directory.
///
/// Steps run in dependency order and the first failure aborts the run with
/// the step named. The manifest is written only after every step finished.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineManifest> {
    config.validate()?;
    let out_dir = config
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("scalefit-run"));
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;

    let mut run = Run { dir: out_dir, steps: Vec::new(), artifacts: BTreeMap::new() };
    let mut seeds = BTreeMap::new();

    // input: either load a dataset CSV or extract a figure
    let dataset = if let Some(csv) = &config.dataset_csv {
        (|| -> Result<Dataset> {
            if !csv.exists() {
                return Err(Error::MissingArtifact(csv.display().to_string()));
            }
            let ds = Dataset::from_csv_path(csv)?;
            ds.to_csv_path(run.path(DATASET_CSV))?;
            run.record(DATASET_CSV)?;
            run.step(
                "load-dataset",
                vec![csv.display().to_string()],
                vec![DATASET_CSV.to_string()],
            );
            Ok(ds)
        })()
        .map_err(|e| e.in_step("load-dataset"))?
    } else {
        (|| -> Result<Dataset> {
            let (svg_text, input_desc) = match &config.figure_svg {
                Some(p) => {
                    if !p.exists() {
                        return Err(Error::MissingArtifact(p.display().to_string()));
                    }
                    (fs::read_to_string(p).map_err(|e| Error::io(p, e))?, p.display().to_string())
                }
                None => {
                    seeds.insert("reference_figure".to_string(), REFERENCE_SEED);
                    (REFERENCE_FIGURE_SVG.to_string(), "bundled reference figure".to_string())
                }
            };
            fs::write(run.path(FIGURE_SVG), &svg_text)
                .map_err(|e| Error::io(run.path(FIGURE_SVG), e))?;
            run.record(FIGURE_SVG)?;
            let extract_config = match &config.extract_config {
                Some(p) => ExtractConfig::from_path(p)?,
                None => ExtractConfig::for_layout(&FigureLayout::default()),
            };
            let extraction = extract_figure(&svg_text, &extract_config)?;
            extraction.dataset.to_csv_path(run.path(DATASET_CSV))?;
            run.record(DATASET_CSV)?;
            extraction.report.to_json_path(&run.path(EXTRACTION_REPORT_JSON))?;
            run.record(EXTRACTION_REPORT_JSON)?;
            run.step(
                "extract",
                vec![input_desc],
                vec![
                    FIGURE_SVG.to_string(),
                    DATASET_CSV.to_string(),
                    EXTRACTION_REPORT_JSON.to_string(),
                ],
            );
            Ok(extraction.dataset)
        })()
        .map_err(|e| e.in_step("extract"))?
    };

    let fc_no = config.fit_config();
    let fc_with = config.fit_config_keep_outliers();

    // fit: with the outlier screen (headline) and without
    let (fit_no, fit_with) = (|| -> Result<(FitResult, FitResult)> {
        let fit_no = fit(&dataset, &fc_no)?;
        fit_no.to_json_path(run.path(FIT_NO_OUTLIERS_JSON))?;
        run.record(FIT_NO_OUTLIERS_JSON)?;
        let fit_with = fit(&dataset, &fc_with)?;
        fit_with.to_json_path(run.path(FIT_WITH_OUTLIERS_JSON))?;
        run.record(FIT_WITH_OUTLIERS_JSON)?;
        run.step(
            "fit",
            vec![DATASET_CSV.to_string()],
            vec![FIT_NO_OUTLIERS_JSON.to_string(), FIT_WITH_OUTLIERS_JSON.to_string()],
        );
        Ok((fit_no, fit_with))
    })()
    .map_err(|e| e.in_step("fit"))?;

    // residuals and the log-likelihood ladder
    let (kept, _) = dataset.partition_outliers(fc_no.outlier_threshold);
    let hoff_unr = crate::reference::HOFFMANN_UNROUNDED.to_log();
    let hoff_rep = crate::reference::HOFFMANN_REPORTED.to_log();

    let (rep_ours, rep_reported) = (|| -> Result<(ResidualReport, ResidualReport)> {
        let rep_ours = residual_report(&fit_no.log_params, &kept, &fc_no)?;
        rep_ours.to_csv_path(run.path(RESIDUALS_OUR_FIT_CSV))?;
        run.record(RESIDUALS_OUR_FIT_CSV)?;
        let rep_unrounded = residual_report(&hoff_unr, &kept, &fc_no)?;
        rep_unrounded.to_csv_path(run.path(RESIDUALS_HOFFMANN_UNROUNDED_CSV))?;
        run.record(RESIDUALS_HOFFMANN_UNROUNDED_CSV)?;
        let rep_reported = residual_report(&hoff_rep, &kept, &fc_no)?;
        rep_reported.to_csv_path(run.path(RESIDUALS_HOFFMANN_REPORTED_CSV))?;
        run.record(RESIDUALS_HOFFMANN_REPORTED_CSV)?;

        let ll = |rep: &ResidualReport| -> Result<f64> {
            Ok(sigma_profile_from_residuals(&rep.residuals, config.delta)?.log_likelihood)
        };
        let no_col = LadderColumn {
            n_observations: kept.len(),
            reported: ll(&rep_reported)?,
            unrounded: ll(&rep_unrounded)?,
            our_fit: ll(&rep_ours)?,
        };
        let with_col = LadderColumn {
            n_observations: dataset.len(),
            reported: ll(&residual_report(&hoff_rep, &dataset, &fc_with)?)?,
            unrounded: ll(&residual_report(&hoff_unr, &dataset, &fc_with)?)?,
            our_fit: ll(&residual_report(&fit_with.log_params, &dataset, &fc_with)?)?,
        };
        let loglik = LoglikSummary {
            delta: config.delta,
            no_outliers: no_col,
            with_outliers: with_col,
            gap_unrounded_over_reported: no_col.unrounded - no_col.reported,
            gap_our_fit_over_unrounded: no_col.our_fit - no_col.unrounded,
            lrt: likelihood_ratio_test(no_col.unrounded, no_col.our_fit, 5)?,
        };
        write_json(&run.path(LOGLIK_JSON), &loglik)?;
        run.record(LOGLIK_JSON)?;
        run.step(
            "residuals",
            vec![DATASET_CSV.to_string(), FIT_NO_OUTLIERS_JSON.to_string(),
                 FIT_WITH_OUTLIERS_JSON.to_string()],
            vec![
                RESIDUALS_OUR_FIT_CSV.to_string(),
                RESIDUALS_HOFFMANN_UNROUNDED_CSV.to_string(),
                RESIDUALS_HOFFMANN_REPORTED_CSV.to_string(),
                LOGLIK_JSON.to_string(),
            ],
        );
        Ok((rep_ours, rep_reported))
    })()
    .map_err(|e| e.in_step("residuals"))?;

    // bootstrap (optional)
    let boots: Option<(BootstrapResult, BootstrapResult)> = if config.resamples > 0 {
        Some(
            (|| -> Result<(BootstrapResult, BootstrapResult)> {
                seeds.insert("bootstrap".to_string(), config.seed);
                let boot_no = bootstrap_fit_with_warm(
                    &dataset,
                    &fc_no,
                    config.resamples,
                    config.seed,
                    &fit_no.log_params,
                )?;
                boot_no.to_json_path(run.path(BOOTSTRAP_NO_OUTLIERS_JSON))?;
                run.record(BOOTSTRAP_NO_OUTLIERS_JSON)?;
                let boot_with = bootstrap_fit_with_warm(
                    &dataset,
                    &fc_with,
                    config.resamples,
                    config.seed,
                    &fit_with.log_params,
                )?;
                boot_with.to_json_path(run.path(BOOTSTRAP_WITH_OUTLIERS_JSON))?;
                run.record(BOOTSTRAP_WITH_OUTLIERS_JSON)?;
                run.step(
                    "bootstrap",
                    vec![DATASET_CSV.to_string(), FIT_NO_OUTLIERS_JSON.to_string(),
                         FIT_WITH_OUTLIERS_JSON.to_string()],
                    vec![
                        BOOTSTRAP_NO_OUTLIERS_JSON.to_string(),
                        BOOTSTRAP_WITH_OUTLIERS_JSON.to_string(),
                    ],
                );
                Ok((boot_no, boot_with))
            })()
            .map_err(|e| e.in_step("bootstrap"))?,
        )
    } else {
        None
    };

    // hypothesis tests
    (|| -> Result<()> {
        // z = (ours - Hoffmann) / SE, so positive z means our estimate is higher
        let z_set = |fit_res: &FitResult, boot: &BootstrapResult| -> Result<ZTestSet> {
            let p = &fit_res.params;
            let h = &crate::reference::HOFFMANN_UNROUNDED;
            // SE(E) from the log-space SE via the delta method
            let se = &boot.standard_errors;
            Ok(ZTestSet {
                e: per_parameter_z_test(h.e, p.e, p.e * se[2])?,
                alpha: per_parameter_z_test(h.alpha, p.alpha, se[3])?,
                beta: per_parameter_z_test(h.beta, p.beta, se[4])?,
            })
        };
        let (chi2_no, chi2_with, z_no, z_with) = match &boots {
            Some((boot_no, boot_with)) => {
                let target = crate::reference::HOFFMANN_UNROUNDED.to_log().as_vector();
                (
                    Some(chi2_equality_test(
                        &fit_no.log_params.as_vector(),
                        &target,
                        &boot_no.covariance,
                    )?),
                    Some(chi2_equality_test(
                        &fit_with.log_params.as_vector(),
                        &target,
                        &boot_with.covariance,
                    )?),
                    Some(z_set(&fit_no, boot_no)?),
                    Some(z_set(&fit_with, boot_with)?),
                )
            }
            None => (None, None, None, None),
        };
        let beta_true = crate::reference::HOFFMANN_UNROUNDED.beta;
        let beta_rounded = crate::reference::HOFFMANN_REPORTED.beta;
        let tokens = 1e11;
        let tests = TestsSummary {
            chi2_no_outliers: chi2_no,
            chi2_with_outliers: chi2_with,
            z_no_outliers: z_no,
            z_with_outliers: z_with,
            rounding_bias: RoundingBiasReport {
                beta_true,
                beta_rounded,
                tokens,
                relative_bias: rounding_bias(beta_true, beta_rounded, tokens),
            },
            hoffmann_unrounded: crate::reference::HOFFMANN_UNROUNDED,
            hoffmann_reported: crate::reference::HOFFMANN_REPORTED,
        };
        write_json(&run.path(TESTS_JSON), &tests)?;
        run.record(TESTS_JSON)?;
        let mut inputs = vec![FIT_NO_OUTLIERS_JSON.to_string(), FIT_WITH_OUTLIERS_JSON.to_string()];
        if boots.is_some() {
            inputs.push(BOOTSTRAP_NO_OUTLIERS_JSON.to_string());
            inputs.push(BOOTSTRAP_WITH_OUTLIERS_JSON.to_string());
        }
        run.step("tests", inputs, vec![TESTS_JSON.to_string()]);
        Ok(())
    })()
    .map_err(|e| e.in_step("tests"))?;

    // allocation policy curve and headline numbers
    let curve = (|| -> Result<PolicyCurve> {
        let grid = log_spaced_grid(config.compute_min, config.compute_max, config.grid_points)?;
        let m = DEFAULT_FLOP_PER_PARAM_TOKEN;
        let (curve, band) = match &boots {
            Some((boot_no, _)) => {
                let curve =
                    policy_band(&fit_no.params, &boot_no.samples, &grid, config.coverage, m)?;
                let at_band = policy_band(
                    &fit_no.params,
                    &boot_no.samples,
                    &[config.band_compute],
                    config.coverage,
                    m,
                )?;
                (curve, Some(at_band.points[0]))
            }
            None => (policy_curve(&fit_no.params, &grid, m)?, None),
        };
        curve.to_csv_path(&run.path(POLICY_CURVE_CSV))?;
        run.record(POLICY_CURVE_CSV)?;
        let hoff = &crate::reference::HOFFMANN_UNROUNDED;
        let summary = PolicySummary {
            eval_compute: config.eval_compute,
            our_allocation: optimal_allocation(&fit_no.params, config.eval_compute, m)?,
            hoffmann_allocation: optimal_allocation(hoff, config.eval_compute, m)?,
            our_exponents: policy_exponents(&fit_no.params)?,
            with_outlier_exponents: policy_exponents(&fit_with.params)?,
            hoffmann_exponents: policy_exponents(hoff)?,
            band_compute: config.band_compute,
            coverage: config.coverage,
            band,
        };
        write_json(&run.path(POLICY_JSON), &summary)?;
        run.record(POLICY_JSON)?;
        let mut inputs =
            vec![FIT_NO_OUTLIERS_JSON.to_string(), FIT_WITH_OUTLIERS_JSON.to_string()];
        if boots.is_some() {
            inputs.push(BOOTSTRAP_NO_OUTLIERS_JSON.to_string());
        }
        run.step("policy", inputs, vec![POLICY_CURVE_CSV.to_string(), POLICY_JSON.to_string()]);
        Ok(curve)
    })()
    .map_err(|e| e.in_step("policy"))?;

    // plots
    (|| -> Result<()> {
        let svg = residual_scatter_svg(
            &dataset,
            &rep_ours,
            "Residuals of this run's fit (outliers dropped)",
        )?;
        fs::write(run.path(PLOT_RESIDUALS_OUR_FIT_SVG), svg)
            .map_err(|e| Error::io(run.path(PLOT_RESIDUALS_OUR_FIT_SVG), e))?;
        run.record(PLOT_RESIDUALS_OUR_FIT_SVG)?;
        let svg = residual_scatter_svg(
            &dataset,
            &rep_reported,
            "Residuals of the Hoffmann et al. reported parameters",
        )?;
        fs::write(run.path(PLOT_RESIDUALS_REPORTED_SVG), svg)
            .map_err(|e| Error::io(run.path(PLOT_RESIDUALS_REPORTED_SVG), e))?;
        run.record(PLOT_RESIDUALS_REPORTED_SVG)?;
        let svg = policy_band_svg(&curve, "Compute-optimal tokens per parameter")?;
        fs::write(run.path(PLOT_POLICY_BAND_SVG), svg)
            .map_err(|e| Error::io(run.path(PLOT_POLICY_BAND_SVG), e))?;
        run.record(PLOT_POLICY_BAND_SVG)?;
        run.step(
            "plots",
            vec![
                DATASET_CSV.to_string(),
                RESIDUALS_OUR_FIT_CSV.to_string(),
                RESIDUALS_HOFFMANN_REPORTED_CSV.to_string(),
                POLICY_CURVE_CSV.to_string(),
            ],
            vec![
                PLOT_RESIDUALS_OUR_FIT_SVG.to_string(),
                PLOT_RESIDUALS_REPORTED_SVG.to_string(),
                PLOT_POLICY_BAND_SVG.to_string(),
            ],
        );
        Ok(())
    })()
    .map_err(|e| e.in_step("plots"))?;

    let mut stored_config = config.clone();
    stored_config.out_dir = None;
    let manifest = PipelineManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: stored_config,
        seeds,
        steps: run.steps,
        artifacts: run.artifacts,
    };
    manifest.to_json_path(run.dir.join(MANIFEST_JSON))?;

    // the report renders from the manifest and the files it names, so it
    // comes last and is deliberately not a manifest artifact itself
    crate::report::render_report_to_path(&run.dir).map_err(|e| e.in_step("report"))?;
    Ok(manifest)
}

/// [`run_pipeline`] with the configuration loaded from a TOML file.
pub fn run_pipeline_from_file(config_path: &Path) -> Result<PipelineManifest> {
    let config = PipelineConfig::from_toml_path(config_path)?;
    run_pipeline(&config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RunObservation;
    use crate::reference::GENERATING_PARAMS;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn config_defaults_from_empty_toml() {
        let c: PipelineConfig = toml::from_str("").unwrap();
        assert_eq!(c, PipelineConfig::default());
        assert_eq!(c.seed, 2022);
        assert_eq!(c.resamples, 4000);
        assert_eq!(c.eval_compute, 5.88e23);
    }

    #[test]
    fn config_rejects_conflicting_inputs() {
        let c = PipelineConfig {
            figure_svg: Some("a.svg".into()),
            dataset_csv: Some("b.csv".into()),
            ..PipelineConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_rejects_tiny_resample_counts() {
        let c = PipelineConfig { resamples: 10, ..PipelineConfig::default() };
        assert!(c.validate().is_err());
        let c = PipelineConfig { resamples: 0, ..PipelineConfig::default() };
        assert!(c.validate().is_ok());
    }

    #[test]
    fn missing_input_error_names_path_and_step() {
        let dir = tempfile::tempdir().unwrap();
        let config = PipelineConfig {
            dataset_csv: Some(dir.path().join("absent.csv")),
            out_dir: Some(dir.path().join("run")),
            resamples: 0,
            ..PipelineConfig::default()
        };
        let err = run_pipeline(&config).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        let msg = err.to_string();
        assert!(msg.contains("load-dataset"), "{msg}");
        assert!(msg.contains("absent.csv"), "{msg}");
    }

    fn tiny_dataset() -> Dataset {
        // noiseless draws from the generating law, two compute levels
        let mut obs = Vec::new();
        for (i, (n, c)) in [
            (2e8, 1e19), (4e8, 1e19), (8e8, 1e19), (1.6e9, 1e19), (3.2e9, 1e19),
            (6e8, 1e20), (1.2e9, 1e20), (2.4e9, 1e20), (4.8e9, 1e20), (9.6e9, 1e20),
        ]
        .iter()
        .enumerate()
        {
            let d = c / (6.0 * n);
            obs.push(RunObservation {
                source_id: format!("t{i}"),
                n_params: *n,
                flop: *c,
                tokens: d,
                loss: GENERATING_PARAMS.predict_loss(*n, d).unwrap(),
            });
        }
        Dataset::new(obs, "pipeline unit test").unwrap()
    }

    #[test]
    fn csv_input_runs_end_to_end_without_bootstrap() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("input.csv");
        tiny_dataset().to_csv_path(&csv).unwrap();

        let config = PipelineConfig {
            dataset_csv: Some(csv),
            out_dir: Some(dir.path().join("run")),
            resamples: 0,
            ..PipelineConfig::default()
        };
        let manifest = run_pipeline(&config).unwrap();

        // extraction was skipped, bootstrap was skipped
        let step_names: Vec<&str> = manifest.steps.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(step_names, ["load-dataset", "fit", "residuals", "tests", "policy", "plots"]);
        assert!(!manifest.has_bootstrap());
        assert!(!manifest.artifacts.contains_key(EXTRACTION_REPORT_JSON));

        // every artifact verifies, and the tests artifact flags the gaps
        manifest.verify(&dir.path().join("run")).unwrap();
        let tests = TestsSummary::from_json_path(dir.path().join("run").join(TESTS_JSON)).unwrap();
        assert!(tests.chi2_no_outliers.is_none());
        assert!((tests.rounding_bias.relative_bias - 0.132).abs() < 0.002);
        let policy =
            PolicySummary::from_json_path(dir.path().join("run").join(POLICY_JSON)).unwrap();
        assert!(policy.band.is_none());

        // the manifest round-trips
        let back = PipelineManifest::from_json_path(
            dir.path().join("run").join(MANIFEST_JSON),
        )
        .unwrap();
        assert_eq!(back, manifest);
    }

    #[test]
    fn identical_inputs_give_identical_artifact_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("input.csv");
        tiny_dataset().to_csv_path(&csv).unwrap();

        let mk = |sub: &str| PipelineConfig {
            dataset_csv: Some(csv.clone()),
            out_dir: Some(dir.path().join(sub)),
            resamples: 0,
            ..PipelineConfig::default()
        };
        let a = run_pipeline(&mk("run_a")).unwrap();
        let b = run_pipeline(&mk("run_b")).unwrap();
        assert_eq!(a.artifacts, b.artifacts);
        assert_eq!(a, b);
    }

    #[test]
    fn verify_catches_edits_and_deletions() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("input.csv");
        tiny_dataset().to_csv_path(&csv).unwrap();
        let run_dir = dir.path().join("run");
        let config = PipelineConfig {
            dataset_csv: Some(csv),
            out_dir: Some(run_dir.clone()),
            resamples: 0,
            ..PipelineConfig::default()
        };
        let manifest = run_pipeline(&config).unwrap();

        fs::write(run_dir.join(POLICY_JSON), "{}").unwrap();
        let err = manifest.verify(&run_dir).unwrap_err();
        assert!(err.to_string().contains("manifest hash"), "{err}");

        fs::remove_file(run_dir.join(POLICY_JSON)).unwrap();
        let err = manifest.verify(&run_dir).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }
}
