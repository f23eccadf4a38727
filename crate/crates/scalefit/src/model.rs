//! Core data model: training-run observations, scaling-law parameters in
//! linear and log space, fit configuration, and dataset I/O.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector5;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Assumed FLOP cost of one parameter-token: `C = 6 * N * D`.
pub const DEFAULT_FLOP_PER_PARAM_TOKEN: f64 = 6.0;

/// Default tokens-per-parameter threshold below which a run counts as an
/// undertrained outlier.
pub const DEFAULT_OUTLIER_THRESHOLD: f64 = 0.4;

/// One training run: model size, training compute, token count, final loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunObservation {
    /// Identifier carried through from extraction (for example `p0017`).
    pub source_id: String,
    /// Model parameter count `N`.
    pub n_params: f64,
    /// Training compute in FLOP.
    pub flop: f64,
    /// Training tokens `D`.
    pub tokens: f64,
    /// Final training loss.
    pub loss: f64,
}

impl RunObservation {
    /// Tokens seen per model parameter; the outlier screen keys off this.
    pub fn tokens_per_param(&self) -> f64 {
        self.tokens / self.n_params
    }

    fn validate(&self) -> Result<()> {
        let fields = [
            ("n_params", self.n_params),
            ("flop", self.flop),
            ("tokens", self.tokens),
            ("loss", self.loss),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::BadInput(format!(
                    "observation {}: {} must be positive and finite, got {}",
                    self.source_id, name, v
                )));
            }
        }
        Ok(())
    }
}

/// Derive a token count from compute and model size via `C = m * N * D`.
pub fn tokens_from_flop(flop: f64, n_params: f64, flop_per_param_token: f64) -> Result<f64> {
    if !(flop.is_finite() && flop > 0.0) || !(n_params.is_finite() && n_params > 0.0) {
        return Err(Error::BadInput(format!(
            "tokens_from_flop needs positive flop and n_params, got ({flop}, {n_params})"
        )));
    }
    if !(flop_per_param_token.is_finite() && flop_per_param_token > 0.0) {
        return Err(Error::BadInput(format!(
            "flop_per_param_token must be positive, got {flop_per_param_token}"
        )));
    }
    Ok(flop / (flop_per_param_token * n_params))
}

/// Scaling-law parameters in linear space: `L(N, D) = E + A/N^alpha + B/D^beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingLawParams {
    /// Irreducible loss `E`.
    pub e: f64,
    /// Coefficient `A` of the model-size term.
    pub a: f64,
    /// Coefficient `B` of the data term.
    pub b: f64,
    /// Model-size exponent.
    pub alpha: f64,
    /// Data exponent.
    pub beta: f64,
}

impl ScalingLawParams {
    pub const fn new(e: f64, a: f64, b: f64, alpha: f64, beta: f64) -> Self {
        Self { e, a, b, alpha, beta }
    }

    /// True when every coefficient is positive and finite, so the law is a
    /// strictly decreasing function of both `N` and `D`.
    pub fn is_valid(&self) -> bool {
        [self.e, self.a, self.b, self.alpha, self.beta]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
    }

    /// Exact log-space image; `to_log` then [`LogSpaceParams::to_linear`] is
    /// the identity up to floating-point rounding.
    pub fn to_log(&self) -> LogSpaceParams {
        LogSpaceParams {
            log_a: self.a.ln(),
            log_b: self.b.ln(),
            log_e: self.e.ln(),
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    /// Evaluate the law at a model size and token count.
    pub fn predict_loss(&self, n: f64, d: f64) -> Result<f64> {
        if !(n.is_finite() && n > 0.0) || !(d.is_finite() && d > 0.0) {
            return Err(Error::BadInput(format!(
                "predict_loss needs positive n and d, got ({n}, {d})"
            )));
        }
        Ok(self.e + self.a / n.powf(self.alpha) + self.b / d.powf(self.beta))
    }
}

/// The same law parameterized as `(log A, log B, log E, alpha, beta)`, the
/// coordinates the optimizer and the bootstrap covariance work in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogSpaceParams {
    pub log_a: f64,
    pub log_b: f64,
    pub log_e: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LogSpaceParams {
    pub const fn new(log_a: f64, log_b: f64, log_e: f64, alpha: f64, beta: f64) -> Self {
        Self { log_a, log_b, log_e, alpha, beta }
    }

    /// Exponentiate the coefficient coordinates back to linear space.
    pub fn to_linear(&self) -> ScalingLawParams {
        ScalingLawParams {
            e: self.log_e.exp(),
            a: self.log_a.exp(),
            b: self.log_b.exp(),
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    /// Fixed component order `(log_a, log_b, log_e, alpha, beta)`; covariance
    /// rows, tie-breaking, and reports all use this order.
    pub fn as_vector(&self) -> Vector5<f64> {
        Vector5::new(self.log_a, self.log_b, self.log_e, self.alpha, self.beta)
    }

    pub fn from_vector(v: &Vector5<f64>) -> Self {
        Self { log_a: v[0], log_b: v[1], log_e: v[2], alpha: v[3], beta: v[4] }
    }

    /// A fit is degenerate when either exponent is non-positive: the law stops
    /// being a decreasing function of `N` or `D`.
    pub fn is_degenerate(&self) -> bool {
        !(self.alpha > 0.0 && self.beta > 0.0)
    }
}

/// How per-run Huber losses combine into the scalar objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Sum,
    Mean,
}

impl Aggregation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Aggregation::Sum => "sum",
            Aggregation::Mean => "mean",
        }
    }
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Aggregation::Sum),
            "mean" => Ok(Aggregation::Mean),
            other => Err(Error::BadInput(format!(
                "aggregation must be \"sum\" or \"mean\", got \"{other}\""
            ))),
        }
    }
}

/// Cartesian grid of optimizer starting points in log space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitGrid {
    pub log_a: Vec<f64>,
    pub log_b: Vec<f64>,
    pub log_e: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl InitGrid {
    /// The standard 4500-point grid:
    /// `log_a, log_b in {0, 5, 10, 15, 20, 25}`, `log_e in {-1, -0.5, 0, 0.5, 1}`,
    /// `alpha, beta in {0, 0.5, 1, 1.5, 2}`.
    pub fn standard() -> Self {
        let sixes: Vec<f64> = (0..6).map(|i| 5.0 * i as f64).collect();
        let log_e: Vec<f64> = (0..5).map(|i| -1.0 + 0.5 * i as f64).collect();
        let exps: Vec<f64> = (0..5).map(|i| 0.5 * i as f64).collect();
        Self {
            log_a: sixes.clone(),
            log_b: sixes,
            log_e,
            alpha: exps.clone(),
            beta: exps,
        }
    }

    /// A sparse grid for tests and quick demos (32 starts).
    pub fn coarse() -> Self {
        Self {
            log_a: vec![0.0, 10.0],
            log_b: vec![0.0, 10.0],
            log_e: vec![-0.5, 0.5],
            alpha: vec![0.25, 0.75],
            beta: vec![0.25, 0.75],
        }
    }

    pub fn len(&self) -> usize {
        self.log_a.len() * self.log_b.len() * self.log_e.len() * self.alpha.len() * self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Enumerate all grid points in lexicographic order with `log_a`
    /// outermost and `beta` innermost; grid run indices refer to this order.
    pub fn points(&self) -> Vec<LogSpaceParams> {
        let mut out = Vec::with_capacity(self.len());
        for &la in &self.log_a {
            for &lb in &self.log_b {
                for &le in &self.log_e {
                    for &al in &self.alpha {
                        for &be in &self.beta {
                            out.push(LogSpaceParams::new(la, lb, le, al, be));
                        }
                    }
                }
            }
        }
        out
    }

    fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::BadInput("init grid has an empty axis".into()));
        }
        let axes = [&self.log_a, &self.log_b, &self.log_e, &self.alpha, &self.beta];
        if axes.iter().any(|ax| ax.iter().any(|v| !v.is_finite())) {
            return Err(Error::BadInput("init grid contains a non-finite value".into()));
        }
        Ok(())
    }
}

/// Everything that shapes one fit: robustness scale, starting grid,
/// aggregation mode, stopping rules, and the outlier screen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Huber transition scale in log-loss space.
    pub delta: f64,
    /// Optimizer starting points.
    pub init_grid: InitGrid,
    /// Sum or mean of per-run Huber losses.
    pub aggregation: Aggregation,
    /// Primary stop: gradient infinity norm, measured on the sum-aggregated
    /// objective so the criterion does not loosen with dataset size.
    pub grad_tolerance: f64,
    /// Secondary stop: relative objective change per iteration.
    pub relative_change_tolerance: f64,
    /// Optional loose stop on the absolute objective change per iteration,
    /// applied to the aggregated objective as configured. Off by default;
    /// exists to demonstrate how such a rule interacts with `aggregation`.
    pub absolute_change_stop: Option<f64>,
    /// Iteration cap per start.
    pub max_iterations: usize,
    /// Whether fits first drop undertrained runs.
    pub drop_outliers: bool,
    /// Tokens-per-parameter threshold for the outlier screen.
    pub outlier_threshold: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            delta: 1e-3,
            init_grid: InitGrid::standard(),
            aggregation: Aggregation::Sum,
            grad_tolerance: 1e-8,
            relative_change_tolerance: 1e-12,
            absolute_change_stop: None,
            max_iterations: 600,
            drop_outliers: true,
            outlier_threshold: DEFAULT_OUTLIER_THRESHOLD,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(Error::BadInput(format!("delta must be positive, got {}", self.delta)));
        }
        if !(self.grad_tolerance.is_finite() && self.grad_tolerance > 0.0) {
            return Err(Error::BadInput(format!(
                "grad_tolerance must be positive, got {}",
                self.grad_tolerance
            )));
        }
        if !(self.relative_change_tolerance.is_finite() && self.relative_change_tolerance >= 0.0) {
            return Err(Error::BadInput(format!(
                "relative_change_tolerance must be non-negative, got {}",
                self.relative_change_tolerance
            )));
        }
        if let Some(t) = self.absolute_change_stop {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::BadInput(format!(
                    "absolute_change_stop must be positive when set, got {t}"
                )));
            }
        }
        if self.max_iterations == 0 {
            return Err(Error::BadInput("max_iterations must be at least 1".into()));
        }
        if !(self.outlier_threshold.is_finite() && self.outlier_threshold > 0.0) {
            return Err(Error::BadInput(format!(
                "outlier_threshold must be positive, got {}",
                self.outlier_threshold
            )));
        }
        self.init_grid.validate()
    }
}

/// An ordered collection of runs plus a provenance note describing where the
/// numbers came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub observations: Vec<RunObservation>,
    pub provenance: String,
}

impl Dataset {
    pub fn new(observations: Vec<RunObservation>, provenance: impl Into<String>) -> Result<Self> {
        let ds = Self { observations, provenance: provenance.into() };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for obs in &self.observations {
            obs.validate()?;
        }
        Ok(())
    }

    /// Split into (kept, dropped) by the tokens-per-parameter screen,
    /// preserving order within each part.
    pub fn partition_outliers(&self, threshold: f64) -> (Dataset, Dataset) {
        let (dropped, kept): (Vec<_>, Vec<_>) = self
            .observations
            .iter()
            .cloned()
            .partition(|o| o.tokens_per_param() < threshold);
        let kept = Dataset {
            observations: kept,
            provenance: self.provenance.clone(),
        };
        let dropped = Dataset {
            observations: dropped,
            provenance: format!("{} (dropped: tokens/param < {})", self.provenance, threshold),
        };
        (kept, dropped)
    }

    /// Build a bootstrap resample by index; indices may repeat.
    pub fn resample(&self, indices: &[usize]) -> Result<Dataset> {
        let mut observations = Vec::with_capacity(indices.len());
        for &i in indices {
            let obs = self.observations.get(i).ok_or_else(|| {
                Error::BadInput(format!("resample index {i} out of range (n={})", self.len()))
            })?;
            observations.push(obs.clone());
        }
        Ok(Dataset { observations, provenance: self.provenance.clone() })
    }

    /// Read the canonical CSV form (`source_id,n_params,flop,tokens,loss`).
    pub fn from_csv_reader(r: impl Read, provenance: impl Into<String>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let expected = ["source_id", "n_params", "flop", "tokens", "loss"];
        let headers = reader.headers()?.clone();
        let got: Vec<&str> = headers.iter().collect();
        if got != expected {
            return Err(Error::BadInput(format!(
                "dataset csv header must be {:?}, got {:?}",
                expected.join(","),
                got.join(",")
            )));
        }
        let mut observations = Vec::new();
        for row in reader.deserialize() {
            let obs: RunObservation = row?;
            observations.push(obs);
        }
        Dataset::new(observations, provenance)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(file, path.display().to_string())
    }

    pub fn to_csv_writer(&self, w: impl Write) -> Result<()> {
        let mut writer = csv::Writer::from_writer(w);
        for obs in &self.observations {
            writer.serialize(obs)?;
        }
        writer.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn to_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.to_csv_writer(file)
    }

    /// JSON mirror of the CSV form, with identical field names.
    pub fn from_json_reader(r: impl Read) -> Result<Self> {
        let ds: Dataset = serde_json::from_reader(r)?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn from_json_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_reader(file)
    }

    pub fn to_json_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }
}
