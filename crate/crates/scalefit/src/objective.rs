//! The robust fitting objective: Huber-penalized residuals between the
//! log of the predicted loss and the log of the observed loss.
//!
//! The prediction is evaluated in log space as
//! `LSE(log_a - alpha*ln N, log_b - beta*ln D, log_e)`, which equals
//! `ln(E + A/N^alpha + B/D^beta)` exactly but stays finite for extreme
//! parameter values the starting grid visits.

use std::io::Write;

use nalgebra::Vector5;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Aggregation, Dataset, FitConfig, LogSpaceParams};

/// Huber penalty: quadratic inside `|x| <= delta`, linear outside.
pub fn huber(delta: f64, x: f64) -> f64 {
    let ax = x.abs();
    if ax <= delta {
        0.5 * x * x
    } else {
        delta * (ax - 0.5 * delta)
    }
}

/// Derivative of [`huber`] in `x`; the kink at `|x| = delta` takes the
/// quadratic-branch value, which both branches agree on anyway.
pub fn huber_derivative(delta: f64, x: f64) -> f64 {
    if x.abs() <= delta {
        x
    } else {
        delta * x.signum()
    }
}

/// Numerically stable `ln(sum(exp(terms)))` via max-shifting.
pub fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = terms.iter().map(|t| (t - m).exp()).sum();
    m + s.ln()
}

/// Per-run residuals and Huber losses for one parameter vector, plus the
/// aggregated total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    /// Run identifiers in dataset order.
    pub source_ids: Vec<String>,
    /// `predicted log loss - observed log loss`, in dataset order.
    pub residuals: Vec<f64>,
    /// Huber penalty of each residual.
    pub huber_losses: Vec<f64>,
    /// Sum or mean of `huber_losses` per `aggregation`.
    pub total: f64,
    pub aggregation: Aggregation,
}

impl ResidualReport {
    /// Mean residual and the standard error of that mean.
    pub fn mean_and_se(&self) -> (f64, f64) {
        let n = self.residuals.len() as f64;
        let mean = self.residuals.iter().sum::<f64>() / n;
        let var = self
            .residuals
            .iter()
            .map(|r| (r - mean) * (r - mean))
            .sum::<f64>()
            / (n - 1.0);
        (mean, (var / n).sqrt())
    }

    /// Write `source_id,residual,huber_loss` rows.
    pub fn to_csv_writer(&self, w: impl Write) -> Result<()> {
        let mut writer = csv::Writer::from_writer(w);
        writer.write_record(["source_id", "residual", "huber_loss"])?;
        for i in 0..self.residuals.len() {
            writer.write_record([
                self.source_ids[i].as_str(),
                &format!("{:.17e}", self.residuals[i]),
                &format!("{:.17e}", self.huber_losses[i]),
            ])?;
        }
        writer.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn to_csv_path(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.to_csv_writer(file)
    }

    /// Read rows written by [`to_csv_writer`](Self::to_csv_writer) back; the
    /// total is recomputed under the given aggregation.
    pub fn from_csv_reader(r: impl std::io::Read, aggregation: Aggregation) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["source_id", "residual", "huber_loss"] {
            return Err(Error::BadInput(format!(
                "unexpected residual CSV header: {headers:?}"
            )));
        }
        let mut source_ids = Vec::new();
        let mut residuals = Vec::new();
        let mut huber_losses = Vec::new();
        for record in reader.records() {
            let record = record?;
            source_ids.push(record[0].to_string());
            let parse = |field: &str, name: &str| -> Result<f64> {
                field.parse::<f64>().map_err(|_| {
                    Error::BadInput(format!("bad {name} value in residual CSV: {field:?}"))
                })
            };
            residuals.push(parse(&record[1], "residual")?);
            huber_losses.push(parse(&record[2], "huber_loss")?);
        }
        if residuals.is_empty() {
            return Err(Error::BadInput("residual CSV has no rows".into()));
        }
        let sum: f64 = huber_losses.iter().sum();
        let total = match aggregation {
            Aggregation::Sum => sum,
            Aggregation::Mean => sum / huber_losses.len() as f64,
        };
        Ok(Self { source_ids, residuals, huber_losses, total, aggregation })
    }

    pub fn from_csv_path(path: impl AsRef<std::path::Path>, aggregation: Aggregation) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(file, aggregation)
    }
}

/// Dataset pre-mapped into log space; the optimizer evaluates against this so
/// the logs are taken once per fit rather than once per iteration.
#[derive(Debug, Clone)]
pub(crate) struct LogData {
    pub ln_n: Vec<f64>,
    pub ln_d: Vec<f64>,
    pub ln_l: Vec<f64>,
}

impl LogData {
    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        let mut ln_n = Vec::with_capacity(data.len());
        let mut ln_d = Vec::with_capacity(data.len());
        let mut ln_l = Vec::with_capacity(data.len());
        for obs in &data.observations {
            for (name, v) in [("n_params", obs.n_params), ("tokens", obs.tokens), ("loss", obs.loss)] {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::BadInput(format!(
                        "observation {}: {} must be positive to take logs, got {}",
                        obs.source_id, name, v
                    )));
                }
            }
            ln_n.push(obs.n_params.ln());
            ln_d.push(obs.tokens.ln());
            ln_l.push(obs.loss.ln());
        }
        Ok(Self { ln_n, ln_d, ln_l })
    }

    pub fn len(&self) -> usize {
        self.ln_n.len()
    }

    /// Row-gather for bootstrap resamples.
    pub fn gather(&self, indices: &[u32]) -> Self {
        let pick = |src: &[f64]| indices.iter().map(|&i| src[i as usize]).collect();
        Self {
            ln_n: pick(&self.ln_n),
            ln_d: pick(&self.ln_d),
            ln_l: pick(&self.ln_l),
        }
    }

    /// Residual of run `i` under `v = (log_a, log_b, log_e, alpha, beta)`.
    #[inline]
    fn residual(&self, v: &Vector5<f64>, i: usize) -> f64 {
        let t1 = v[0] - v[3] * self.ln_n[i];
        let t2 = v[1] - v[4] * self.ln_d[i];
        let t3 = v[2];
        let m = t1.max(t2).max(t3);
        let s = (t1 - m).exp() + (t2 - m).exp() + (t3 - m).exp();
        m + s.ln() - self.ln_l[i]
    }

    /// Aggregated objective; summation runs in dataset order so the result is
    /// bit-stable across repeated evaluations.
    pub fn value(&self, v: &Vector5<f64>, delta: f64, aggregation: Aggregation) -> f64 {
        let mut total = 0.0;
        for i in 0..self.len() {
            total += huber(delta, self.residual(v, i));
        }
        match aggregation {
            Aggregation::Sum => total,
            Aggregation::Mean => total / self.len() as f64,
        }
    }

    /// Objective and its gradient in one pass.
    pub fn value_and_grad(
        &self,
        v: &Vector5<f64>,
        delta: f64,
        aggregation: Aggregation,
    ) -> (f64, Vector5<f64>) {
        let mut total = 0.0;
        let mut g = Vector5::zeros();
        for i in 0..self.len() {
            let t1 = v[0] - v[3] * self.ln_n[i];
            let t2 = v[1] - v[4] * self.ln_d[i];
            let t3 = v[2];
            let m = t1.max(t2).max(t3);
            let e1 = (t1 - m).exp();
            let e2 = (t2 - m).exp();
            let e3 = (t3 - m).exp();
            let s = e1 + e2 + e3;
            let r = m + s.ln() - self.ln_l[i];
            total += huber(delta, r);
            let psi = huber_derivative(delta, r);
            let w1 = e1 / s;
            let w2 = e2 / s;
            let w3 = e3 / s;
            g[0] += psi * w1;
            g[1] += psi * w2;
            g[2] += psi * w3;
            g[3] -= psi * w1 * self.ln_n[i];
            g[4] -= psi * w2 * self.ln_d[i];
        }
        match aggregation {
            Aggregation::Sum => (total, g),
            Aggregation::Mean => {
                let n = self.len() as f64;
                (total / n, g / n)
            }
        }
    }

    pub fn residuals(&self, v: &Vector5<f64>) -> Vec<f64> {
        (0..self.len()).map(|i| self.residual(v, i)).collect()
    }
}

/// Aggregated Huber objective for one parameter vector.
pub fn objective_value(params: &LogSpaceParams, data: &Dataset, config: &FitConfig) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::BadInput("objective needs a non-empty dataset".into()));
    }
    let ld = LogData::from_dataset(data)?;
    Ok(ld.value(&params.as_vector(), config.delta, config.aggregation))
}

/// Gradient of [`objective_value`] in `(log_a, log_b, log_e, alpha, beta)`.
pub fn objective_gradient(
    params: &LogSpaceParams,
    data: &Dataset,
    config: &FitConfig,
) -> Result<Vector5<f64>> {
    if data.is_empty() {
        return Err(Error::BadInput("objective needs a non-empty dataset".into()));
    }
    let ld = LogData::from_dataset(data)?;
    Ok(ld.value_and_grad(&params.as_vector(), config.delta, config.aggregation).1)
}

/// Per-run residual diagnostics for one parameter vector.
pub fn residual_report(
    params: &LogSpaceParams,
    data: &Dataset,
    config: &FitConfig,
) -> Result<ResidualReport> {
    if data.is_empty() {
        return Err(Error::BadInput("objective needs a non-empty dataset".into()));
    }
    let ld = LogData::from_dataset(data)?;
    let v = params.as_vector();
    let residuals = ld.residuals(&v);
    let huber_losses: Vec<f64> = residuals.iter().map(|&r| huber(config.delta, r)).collect();
    let mut total: f64 = huber_losses.iter().sum();
    if config.aggregation == Aggregation::Mean {
        total /= data.len() as f64;
    }
    Ok(ResidualReport {
        source_ids: data.observations.iter().map(|o| o.source_id.clone()).collect(),
        residuals,
        huber_losses,
        total,
        aggregation: config.aggregation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{RunObservation, ScalingLawParams};
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    fn small_dataset() -> Dataset {
        let mut observations = Vec::new();
        let truth = ScalingLawParams::new(1.8, 480.0, 2000.0, 0.35, 0.37);
        let pts = [
            (1e8, 2e9),
            (3e8, 5e9),
            (1e9, 2e10),
            (5e9, 1e11),
            (2e10, 4e11),
            (1e8, 4e10),
            (7e8, 7e9),
        ];
        for (i, (n, d)) in pts.iter().enumerate() {
            // Deterministic small perturbations so residuals are non-zero.
            let bump = 1.0 + 0.01 * ((i as f64 * 2.399).sin());
            observations.push(RunObservation {
                source_id: format!("s{i}"),
                n_params: *n,
                flop: 6.0 * n * d,
                tokens: *d,
                loss: truth.predict_loss(*n, *d).unwrap() * bump,
            });
        }
        Dataset::new(observations, "synthetic").unwrap()
    }

    #[test]
    fn huber_branch_values() {
        let d = 1e-3;
        // Quadratic branch.
        assert_relative_eq!(huber(d, 5e-4), 1.25e-7, max_relative = 1e-15);
        assert_relative_eq!(huber(d, -5e-4), 1.25e-7, max_relative = 1e-15);
        // Linear branch: delta * (|x| - delta/2).
        assert_relative_eq!(huber(d, 1.0), 9.995e-4, max_relative = 1e-15);
        assert_relative_eq!(huber(d, -1.0), 9.995e-4, max_relative = 1e-15);
        // Exactly at the kink both branches agree.
        assert_relative_eq!(huber(d, d), 0.5 * d * d, max_relative = 1e-15);
    }

    #[test]
    fn huber_continuity_at_kink() {
        let d = 1e-3;
        let eps = 1e-12;
        let below = huber(d, d - eps);
        let above = huber(d, d + eps);
        assert_abs_diff_eq!(below, above, epsilon = 1e-14);
        assert_abs_diff_eq!(
            huber_derivative(d, d - eps),
            huber_derivative(d, d + eps),
            epsilon = 1e-11
        );
        assert_eq!(huber_derivative(d, d), d);
        assert_eq!(huber_derivative(d, -d), -d);
    }

    proptest! {
        #[test]
        fn huber_even_and_monotone(x in -10.0f64..10.0, d in 1e-4f64..1.0) {
            prop_assert!((huber(d, x) - huber(d, -x)).abs() < 1e-15);
            prop_assert!(huber(d, x) >= 0.0);
            // Monotone in |x|.
            prop_assert!(huber(d, 1.5 * x.abs() + 1e-9) >= huber(d, x.abs()));
        }
    }

    #[test]
    fn log_sum_exp_basics() {
        assert_relative_eq!(log_sum_exp(&[0.0, 0.0, 0.0]), 3f64.ln(), max_relative = 1e-15);
        // Stable far outside naive exp range.
        assert_relative_eq!(
            log_sum_exp(&[1000.0, 0.0]),
            1000.0 + (1.0 + (-1000.0f64).exp()).ln(),
            max_relative = 1e-15
        );
        assert_relative_eq!(log_sum_exp(&[-1000.0, -1001.0]), -1000.0 + (1.0 + (-1.0f64).exp()).ln(), max_relative = 1e-12);
        // Shift invariance: LSE(t + c) = LSE(t) + c.
        let t = [0.3, -1.2, 2.4];
        let shifted: Vec<f64> = t.iter().map(|x| x + 7.5).collect();
        assert_relative_eq!(log_sum_exp(&shifted), log_sum_exp(&t) + 7.5, max_relative = 1e-14);
    }

    #[test]
    fn residual_matches_linear_space_prediction() {
        // For moderate parameters the LSE form must agree with
        // ln(E + A/N^alpha + B/D^beta) computed directly.
        let p = ScalingLawParams::new(1.8172, 482.01, 2085.43, 0.3478, 0.3658);
        let data = small_dataset();
        let report = residual_report(&p.to_log(), &data, &FitConfig::default()).unwrap();
        for (i, obs) in data.observations.iter().enumerate() {
            let direct = p.predict_loss(obs.n_params, obs.tokens).unwrap().ln() - obs.loss.ln();
            assert_relative_eq!(report.residuals[i], direct, max_relative = 1e-12, epsilon = 1e-14);
        }
    }

    #[test]
    fn objective_value_hand_computed() {
        // Two runs with known residuals.
        let p = ScalingLawParams::new(2.0, 0.0f64.exp(), 0.0f64.exp(), 0.5, 0.5);
        // Choose loss so ln(pred/loss) is exactly +-0.1.
        let n = 1e6;
        let d = 1e6;
        let pred = p.predict_loss(n, d).unwrap();
        let data = Dataset::new(
            vec![
                RunObservation {
                    source_id: "hi".into(),
                    n_params: n,
                    flop: 6.0 * n * d,
                    tokens: d,
                    loss: pred * (-0.1f64).exp(),
                },
                RunObservation {
                    source_id: "lo".into(),
                    n_params: n,
                    flop: 6.0 * n * d,
                    tokens: d,
                    loss: pred * (0.1f64).exp(),
                },
            ],
            "hand",
        )
        .unwrap();
        let cfg = FitConfig::default();
        let expect_each = 1e-3 * (0.1 - 0.5e-3);
        let total = objective_value(&p.to_log(), &data, &cfg).unwrap();
        assert_relative_eq!(total, 2.0 * expect_each, max_relative = 1e-12);
        let mut mean_cfg = cfg;
        mean_cfg.aggregation = Aggregation::Mean;
        let mean_total = objective_value(&p.to_log(), &data, &mean_cfg).unwrap();
        assert_relative_eq!(mean_total, expect_each, max_relative = 1e-12);
    }

    #[test]
    fn mean_is_sum_over_n() {
        let data = small_dataset();
        let p = ScalingLawParams::new(1.8, 480.0, 2000.0, 0.35, 0.37).to_log();
        let sum_cfg = FitConfig::default();
        let mut mean_cfg = sum_cfg.clone();
        mean_cfg.aggregation = Aggregation::Mean;
        let s = objective_value(&p, &data, &sum_cfg).unwrap();
        let m = objective_value(&p, &data, &mean_cfg).unwrap();
        assert_eq!(m, s / data.len() as f64);
        let gs = objective_gradient(&p, &data, &sum_cfg).unwrap();
        let gm = objective_gradient(&p, &data, &mean_cfg).unwrap();
        assert_relative_eq!((gs / data.len() as f64 - gm).norm(), 0.0, epsilon = 1e-18);
    }

    fn finite_difference_gradient(
        p: &LogSpaceParams,
        data: &Dataset,
        cfg: &FitConfig,
    ) -> Vector5<f64> {
        let v0 = p.as_vector();
        let mut g = Vector5::zeros();
        for k in 0..5 {
            let h = 1e-6 * v0[k].abs().max(1.0);
            let mut vp = v0;
            vp[k] += h;
            let mut vm = v0;
            vm[k] -= h;
            let fp = objective_value(&LogSpaceParams::from_vector(&vp), data, cfg).unwrap();
            let fm = objective_value(&LogSpaceParams::from_vector(&vm), data, cfg).unwrap();
            g[k] = (fp - fm) / (2.0 * h);
        }
        g
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data = small_dataset();
        let cfg = FitConfig::default();
        // Far from optimum (linear branch), near truth (mixed branches), and
        // a point with extreme coefficients exercising the max-shift.
        let probes = [
            LogSpaceParams::new(5.0, 5.0, 0.0, 0.5, 0.5),
            ScalingLawParams::new(1.8, 480.0, 2000.0, 0.35, 0.37).to_log(),
            LogSpaceParams::new(25.0, 0.0, -1.0, 2.0, 0.0),
            LogSpaceParams::new(0.0, 20.0, 1.0, 0.0, 1.5),
        ];
        for p in probes {
            let analytic = objective_gradient(&p, &data, &cfg).unwrap();
            let numeric = finite_difference_gradient(&p, &data, &cfg);
            for k in 0..5 {
                assert_relative_eq!(analytic[k], numeric[k], max_relative = 1e-5, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences_mean_mode() {
        let data = small_dataset();
        let mut cfg = FitConfig::default();
        cfg.aggregation = Aggregation::Mean;
        let p = LogSpaceParams::new(6.2, 7.6, 0.6, 0.35, 0.37);
        let analytic = objective_gradient(&p, &data, &cfg).unwrap();
        let numeric = finite_difference_gradient(&p, &data, &cfg);
        for k in 0..5 {
            assert_relative_eq!(analytic[k], numeric[k], max_relative = 1e-5, epsilon = 1e-12);
        }
    }

    #[test]
    fn report_totals_and_csv() {
        let data = small_dataset();
        let cfg = FitConfig::default();
        let p = ScalingLawParams::new(1.8, 480.0, 2000.0, 0.35, 0.37).to_log();
        let report = residual_report(&p, &data, &cfg).unwrap();
        assert_eq!(report.residuals.len(), data.len());
        assert_eq!(report.huber_losses.len(), data.len());
        assert_eq!(report.source_ids.len(), data.len());
        let sum: f64 = report.huber_losses.iter().sum();
        assert_relative_eq!(report.total, sum, max_relative = 1e-15);
        assert_relative_eq!(
            report.total,
            objective_value(&p, &data, &cfg).unwrap(),
            max_relative = 1e-15
        );
        let mut buf = Vec::new();
        report.to_csv_writer(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("source_id,residual,huber_loss\n"));
        assert_eq!(text.lines().count(), data.len() + 1);

        // round trip: the 17-digit formatting preserves every f64 exactly
        let back = ResidualReport::from_csv_reader(text.as_bytes(), Aggregation::Sum).unwrap();
        assert_eq!(back.source_ids, report.source_ids);
        assert_eq!(back.residuals, report.residuals);
        assert_eq!(back.huber_losses, report.huber_losses);
        assert_relative_eq!(back.total, report.total, max_relative = 1e-15);
    }

    #[test]
    fn residual_csv_reader_rejects_wrong_header() {
        let text = "id,res\nrun0,0.1\n";
        assert!(ResidualReport::from_csv_reader(text.as_bytes(), Aggregation::Sum).is_err());
    }

    #[test]
    fn empty_dataset_rejected() {
        let data = Dataset { observations: vec![], provenance: "empty".into() };
        let p = LogSpaceParams::new(0.0, 0.0, 0.0, 0.5, 0.5);
        assert!(objective_value(&p, &data, &FitConfig::default()).is_err());
    }

    #[test]
    fn logdata_gather_matches_resample() {
        let data = small_dataset();
        let ld = LogData::from_dataset(&data).unwrap();
        let idx = [3u32, 0, 3, 6];
        let gathered = ld.gather(&idx);
        let resampled = data.resample(&[3, 0, 3, 6]).unwrap();
        let ld2 = LogData::from_dataset(&resampled).unwrap();
        assert_eq!(gathered.ln_n, ld2.ln_n);
        assert_eq!(gathered.ln_d, ld2.ln_d);
        assert_eq!(gathered.ln_l, ld2.ln_l);
    }
}
