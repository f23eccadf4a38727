//! Nonparametric bootstrap over observations: resample, refit, and read the
//! spread of refits as the sampling distribution of the estimator.
//!
//! Resample index streams are pre-generated sequentially from one seeded
//! generator before any parallel work, so results are bit-identical whatever
//! the worker count.

use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix5, Vector5};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitter::{best_of_grid_prepared, fit, minimize_prepared};
use crate::model::{Dataset, FitConfig, LogSpaceParams};
use crate::objective::LogData;
use crate::stats::normal_quantile;

/// Default resample count.
pub const DEFAULT_RESAMPLES: usize = 4000;

/// Fraction of resamples allowed to fail before the whole bootstrap errors.
pub const MAX_EXCLUDED_FRACTION: f64 = 0.01;

/// A statistic mapped over bootstrap samples: sample mean, sample SE, and
/// requested empirical quantiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedStatistic {
    pub point: f64,
    pub se: f64,
    /// `(probability, value)` pairs in request order.
    pub quantiles: Vec<(f64, f64)>,
}

impl DerivedStatistic {
    /// Value at a requested probability, if it was requested.
    pub fn quantile(&self, p: f64) -> Option<f64> {
        self.quantiles.iter().find(|(q, _)| (*q - p).abs() < 1e-12).map(|(_, v)| *v)
    }
}

/// Bootstrap output: the resampled parameter vectors, their covariance, and
/// the derived allocation exponent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// Converged resample fits in resample order (excluded ones omitted).
    pub samples: Vec<LogSpaceParams>,
    /// Component-wise mean of `samples`.
    pub mean: Vector5<f64>,
    /// Unbiased sample covariance in `(log_a, log_b, log_e, alpha, beta)`.
    pub covariance: Matrix5<f64>,
    /// Square roots of the covariance diagonal.
    pub standard_errors: Vector5<f64>,
    /// `beta/(alpha+beta)` mapped over the samples, with an 80% interval.
    pub a_policy: DerivedStatistic,
    pub seed: u64,
    pub requested_resamples: usize,
    pub excluded_resamples: usize,
    /// Observations per resample (the working dataset size).
    pub sample_size: usize,
    /// Full-data optimum every resample fit started from.
    pub warm_start: LogSpaceParams,
}

impl BootstrapResult {
    pub fn to_json_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn from_json_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(file)?)
    }

    /// Write the raw samples as CSV (`log_a,log_b,log_e,alpha,beta`).
    pub fn samples_to_csv_writer(&self, w: impl Write) -> Result<()> {
        let mut writer = csv::Writer::from_writer(w);
        writer.write_record(["log_a", "log_b", "log_e", "alpha", "beta"])?;
        for s in &self.samples {
            let v = s.as_vector();
            writer.write_record((0..5).map(|k| format!("{:.17e}", v[k])))?;
        }
        writer.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn samples_to_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.samples_to_csv_writer(file)
    }

    /// Write the covariance matrix as CSV with labeled rows and columns.
    pub fn covariance_to_csv_writer(&self, w: impl Write) -> Result<()> {
        let names = ["log_a", "log_b", "log_e", "alpha", "beta"];
        let mut writer = csv::Writer::from_writer(w);
        let mut header = vec!["param".to_string()];
        header.extend(names.iter().map(|s| s.to_string()));
        writer.write_record(&header)?;
        for i in 0..5 {
            let mut row = vec![names[i].to_string()];
            row.extend((0..5).map(|j| format!("{:.17e}", self.covariance[(i, j)])));
            writer.write_record(&row)?;
        }
        writer.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn covariance_to_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.covariance_to_csv_writer(file)
    }
}

/// Load samples back from the CSV written by `samples_to_csv_writer`.
pub fn samples_from_csv_path(path: impl AsRef<Path>) -> Result<Vec<LogSpaceParams>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        if row.len() != 5 {
            return Err(Error::BadInput(format!("samples csv row has {} fields, want 5", row.len())));
        }
        let mut v = Vector5::zeros();
        for k in 0..5 {
            v[k] = row[k]
                .parse::<f64>()
                .map_err(|e| Error::BadInput(format!("samples csv: {e}")))?;
        }
        out.push(LogSpaceParams::from_vector(&v));
    }
    Ok(out)
}

/// Component mean and unbiased covariance of parameter samples.
pub fn sample_covariance(samples: &[LogSpaceParams]) -> Result<(Vector5<f64>, Matrix5<f64>)> {
    if samples.len() < 2 {
        return Err(Error::BadInput(format!(
            "covariance needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let n = samples.len() as f64;
    let mut mean = Vector5::zeros();
    for s in samples {
        mean += s.as_vector();
    }
    mean /= n;
    let mut cov = Matrix5::zeros();
    for s in samples {
        let d = s.as_vector() - mean;
        cov += d * d.transpose();
    }
    cov /= n - 1.0;
    Ok((mean, cov))
}

/// Empirical quantile with linear interpolation between order statistics.
pub(crate) fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Map a statistic over bootstrap samples.
pub fn derived_statistic(
    samples: &[LogSpaceParams],
    map: impl Fn(&LogSpaceParams) -> f64,
    quantile_ps: &[f64],
) -> Result<DerivedStatistic> {
    if samples.len() < 2 {
        return Err(Error::BadInput(format!(
            "derived_statistic needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let values: Vec<f64> = samples.iter().map(&map).collect();
    let n = values.len() as f64;
    let point = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - point) * (v - point)).sum::<f64>() / (n - 1.0);
    let mut sorted = values;
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite statistic values"));
    let quantiles = quantile_ps.iter().map(|&p| (p, empirical_quantile(&sorted, p))).collect();
    Ok(DerivedStatistic { point, se: var.sqrt(), quantiles })
}

/// How many more training runs a target confidence-interval width implies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RequiredSamples {
    pub confidence: f64,
    /// Normal quantile used to convert SE to interval width.
    pub z: f64,
    /// Current CI width `2 z se`.
    pub current_width: f64,
    /// `(current_width / target_width)^2`.
    pub factor: f64,
    /// `ceil(n * factor)`.
    pub implied_runs: u64,
}

/// The pure width-ratio form: `(current_width / target_width)^2`.
pub fn required_factor_from_width(current_width: f64, target_width: f64) -> Result<f64> {
    if !(current_width.is_finite() && current_width > 0.0)
        || !(target_width.is_finite() && target_width > 0.0)
    {
        return Err(Error::BadInput(format!(
            "widths must be positive, got ({current_width}, {target_width})"
        )));
    }
    let r = current_width / target_width;
    Ok(r * r)
}

/// Sample-size factor needed to shrink a CI of width `2 z se` down to
/// `target_ci_width`, with the run count that factor implies at dataset
/// size `n`. Standard errors shrink like the square root of the sample size.
pub fn required_sample_factor(
    current_se: f64,
    n: usize,
    target_ci_width: f64,
    confidence: f64,
) -> Result<RequiredSamples> {
    if !(current_se.is_finite() && current_se > 0.0) {
        return Err(Error::BadInput(format!("current_se must be positive, got {current_se}")));
    }
    if n == 0 {
        return Err(Error::BadInput("n must be positive".into()));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::BadInput(format!("confidence must be in (0,1), got {confidence}")));
    }
    let z = normal_quantile(0.5 + confidence / 2.0)?;
    let current_width = 2.0 * z * current_se;
    let factor = required_factor_from_width(current_width, target_ci_width)?;
    Ok(RequiredSamples {
        confidence,
        z,
        current_width,
        factor,
        implied_runs: (n as f64 * factor).ceil() as u64,
    })
}

/// Bootstrap with an explicit warm start (the full-data optimum).
///
/// `data` is screened per `config` first; every resample then draws
/// `n = |working|` indices with replacement and refits from `warm_start`,
/// falling back to the full grid when the warm fit does not converge.
pub fn bootstrap_fit_with_warm(
    data: &Dataset,
    config: &FitConfig,
    resamples: usize,
    seed: u64,
    warm_start: &LogSpaceParams,
) -> Result<BootstrapResult> {
    config.validate()?;
    if resamples < 2 {
        return Err(Error::BadInput(format!("resamples must be at least 2, got {resamples}")));
    }
    let working = if config.drop_outliers {
        data.partition_outliers(config.outlier_threshold).0
    } else {
        data.clone()
    };
    if working.is_empty() {
        return Err(Error::BadInput("no observations left to bootstrap".into()));
    }
    let n = working.len();
    let ld = LogData::from_dataset(&working)?;

    // One sequential pass of index generation keeps the stream independent of
    // scheduling.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let index_sets: Vec<Vec<u32>> = (0..resamples)
        .map(|_| (0..n).map(|_| rng.random_range(0..n as u32)).collect())
        .collect();

    let fits: Vec<Option<LogSpaceParams>> = index_sets
        .par_iter()
        .map(|indices| {
            let sub = ld.gather(indices);
            let warm = minimize_prepared(&sub, config, warm_start);
            if warm.converged && warm.objective.is_finite() {
                return Some(warm.params);
            }
            best_of_grid_prepared(&sub, config).map(|f| f.params)
        })
        .collect();

    let samples: Vec<LogSpaceParams> = fits.iter().filter_map(|f| *f).collect();
    let excluded = resamples - samples.len();
    if (excluded as f64) > MAX_EXCLUDED_FRACTION * resamples as f64 {
        return Err(Error::Numerical(format!(
            "{excluded} of {resamples} bootstrap resamples failed to converge (budget {}%)",
            MAX_EXCLUDED_FRACTION * 100.0
        )));
    }

    let (mean, covariance) = sample_covariance(&samples)?;
    let standard_errors = Vector5::from_fn(|i, _| covariance[(i, i)].max(0.0).sqrt());
    let a_policy =
        derived_statistic(&samples, |p| p.beta / (p.alpha + p.beta), &[0.10, 0.90])?;

    Ok(BootstrapResult {
        samples,
        mean,
        covariance,
        standard_errors,
        a_policy,
        seed,
        requested_resamples: resamples,
        excluded_resamples: excluded,
        sample_size: n,
        warm_start: *warm_start,
    })
}

/// Full bootstrap: grid-fit the data once for the warm start, then resample.
pub fn bootstrap_fit(
    data: &Dataset,
    config: &FitConfig,
    resamples: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    let full = fit(data, config)?;
    bootstrap_fit_with_warm(data, config, resamples, seed, &full.log_params)
}
