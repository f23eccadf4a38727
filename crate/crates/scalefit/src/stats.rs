//! Hypothesis tests and the Huber probability density: the chi-squared
//! parameter-equality test, per-parameter z-tests, the sigma-profile
//! likelihood under the Huber density, the likelihood-ratio test, and the
//! rounding-bias calculation.

use libm::{erf, erfc};
use nalgebra::{Matrix5, Vector5};
use serde::{Deserialize, Serialize};
use statrs::distribution::ContinuousCDF;
use statrs::function::gamma::gamma_ur;

use crate::error::{Error, Result};
use crate::model::{Dataset, ScalingLawParams};
use crate::objective::{huber, LogData};

/// Degrees of freedom shared by the equality and likelihood-ratio tests:
/// five free law parameters (six free coefficients in the density model
/// minus the one scale parameter profiled out under the null).
pub const TEST_DOF: usize = 5;

/// Condition-number ceiling above which a covariance is treated as singular.
pub const COVARIANCE_CONDITION_LIMIT: f64 = 1e12;

/// Standard normal CDF via the complementary error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal survival function `1 - Phi(x)` without cancellation.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile, polished to machine precision with Newton
/// steps on top of the library starting value.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::BadInput(format!("quantile probability must be in (0,1), got {p}")));
    }
    let n = statrs::distribution::Normal::new(0.0, 1.0)
        .map_err(|e| Error::Numerical(format!("normal distribution: {e}")))?;
    let mut z = n.inverse_cdf(p);
    if (1e-10..=1.0 - 1e-10).contains(&p) {
        for _ in 0..2 {
            let pdf = (-z * z / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
            z -= (normal_cdf(z) - p) / pdf;
        }
    }
    Ok(z)
}

/// Chi-squared survival function, accurate deep into the tail.
pub fn chi_squared_sf(x: f64, dof: usize) -> Result<f64> {
    if dof == 0 {
        return Err(Error::BadInput("chi-squared dof must be positive".into()));
    }
    if !x.is_finite() || x < 0.0 {
        return Err(Error::BadInput(format!("chi-squared statistic must be >= 0, got {x}")));
    }
    if x == 0.0 {
        return Ok(1.0);
    }
    Ok(gamma_ur(dof as f64 / 2.0, x / 2.0))
}

/// Which test produced a [`TestReport`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    Chi2Equality,
    ZTest,
    LikelihoodRatio,
}

/// A test statistic with its reference distribution and p-value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub method: TestMethod,
    pub statistic: f64,
    /// Degrees of freedom for chi-squared-based tests; absent for z-tests.
    pub dof: Option<usize>,
    pub p_value: f64,
    /// Human-readable account of the inputs.
    pub summary: String,
    /// Set when a likelihood-ratio statistic had to be clamped at zero.
    pub clamped: bool,
}

/// Joint equality test: `(nu - mu)' Sigma^-1 (nu - mu)` referred to
/// chi-squared with 5 degrees of freedom.
///
/// The covariance is inverted through its symmetric eigendecomposition; a
/// condition number above [`COVARIANCE_CONDITION_LIMIT`] or a non-positive
/// eigenvalue is reported as a numerical failure rather than silently
/// producing a huge statistic.
pub fn chi2_equality_test(
    mu: &Vector5<f64>,
    nu: &Vector5<f64>,
    sigma: &Matrix5<f64>,
) -> Result<TestReport> {
    let scale = sigma.amax().max(1e-300);
    for i in 0..5 {
        for j in (i + 1)..5 {
            if (sigma[(i, j)] - sigma[(j, i)]).abs() > 1e-8 * scale {
                return Err(Error::BadInput(format!(
                    "covariance not symmetric at ({i},{j}): {} vs {}",
                    sigma[(i, j)],
                    sigma[(j, i)]
                )));
            }
        }
    }
    let eig = nalgebra::SymmetricEigen::new(*sigma);
    let mut min_ev = f64::INFINITY;
    let mut max_ev = f64::NEG_INFINITY;
    for ev in eig.eigenvalues.iter() {
        min_ev = min_ev.min(*ev);
        max_ev = max_ev.max(*ev);
    }
    if min_ev <= 0.0 {
        return Err(Error::Numerical(format!(
            "covariance is singular (smallest eigenvalue {min_ev:.3e})"
        )));
    }
    let condition = max_ev / min_ev;
    if condition > COVARIANCE_CONDITION_LIMIT {
        return Err(Error::Numerical(format!(
            "covariance condition number {condition:.3e} exceeds {COVARIANCE_CONDITION_LIMIT:.1e}"
        )));
    }
    let d = nu - mu;
    let rotated = eig.eigenvectors.transpose() * d;
    let mut statistic = 0.0;
    for k in 0..5 {
        statistic += rotated[k] * rotated[k] / eig.eigenvalues[k];
    }
    let p_value = chi_squared_sf(statistic, TEST_DOF)?;
    Ok(TestReport {
        method: TestMethod::Chi2Equality,
        statistic,
        dof: Some(TEST_DOF),
        p_value,
        summary: format!(
            "quadratic form of parameter difference (covariance condition number {condition:.3e})"
        ),
        clamped: false,
    })
}

/// Two-sided z-test of one parameter difference against a bootstrap SE.
pub fn per_parameter_z_test(mu_k: f64, nu_k: f64, se_k: f64) -> Result<TestReport> {
    if !(se_k.is_finite() && se_k > 0.0) {
        return Err(Error::BadInput(format!("standard error must be positive, got {se_k}")));
    }
    let z = (nu_k - mu_k) / se_k;
    let p_value = (2.0 * normal_sf(z.abs())).min(1.0);
    Ok(TestReport {
        method: TestMethod::ZTest,
        statistic: z,
        dof: None,
        p_value,
        summary: format!("two-sided z-test of {nu_k} vs {mu_k} with SE {se_k}"),
        clamped: false,
    })
}

/// Two-sided bootstrap-percentile p-value: how far into the sample tail the
/// reference value sits, floored at `1/n` (zero is not resolvable from a
/// finite resample).
pub fn bootstrap_percentile_p(sample_values: &[f64], reference: f64) -> Result<f64> {
    if sample_values.len() < 2 {
        return Err(Error::BadInput("percentile p-value needs at least 2 samples".into()));
    }
    let n = sample_values.len() as f64;
    let below = sample_values.iter().filter(|v| **v <= reference).count() as f64;
    let above = sample_values.iter().filter(|v| **v >= reference).count() as f64;
    let p = 2.0 * (below.min(above) / n);
    Ok(p.clamp(1.0 / n, 1.0))
}

/// Location-scale Huber density parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HuberDensityParams {
    pub mu: f64,
    pub sigma: f64,
    pub delta: f64,
}

impl HuberDensityParams {
    pub fn new(mu: f64, sigma: f64, delta: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::BadInput(format!("sigma must be positive, got {sigma}")));
        }
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::BadInput(format!("delta must be positive, got {delta}")));
        }
        Ok(Self { mu, sigma, delta })
    }

    /// Normalizing constant `Z(delta)` of the unit-scale density.
    pub fn normalizer(&self) -> f64 {
        huber_normalizer(self.delta)
    }
}

/// `Z(delta) = sqrt(2 pi) (2 Phi(delta) - 1) + 2 exp(-delta^2/2) / delta`,
/// the integral of `exp(-Huber_delta(x))` over the real line.
pub fn huber_normalizer(delta: f64) -> f64 {
    let two_phi_minus_one = erf(delta / std::f64::consts::SQRT_2);
    (2.0 * std::f64::consts::PI).sqrt() * two_phi_minus_one
        + 2.0 * (-delta * delta / 2.0).exp() / delta
}

/// Log of the location-scale Huber density
/// `p(x) = exp(-Huber_delta((x-mu)/sigma)) / (sigma Z(delta))`.
pub fn huber_log_density(x: f64, params: &HuberDensityParams) -> f64 {
    let u = (x - params.mu) / params.sigma;
    -huber(params.delta, u) - params.normalizer().ln() - params.sigma.ln()
}

/// Profile likelihood over the scale parameter at fixed law parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaProfile {
    pub sigma_hat: f64,
    pub log_likelihood: f64,
    pub n_observations: usize,
}

/// Maximize `sum_i log p_{0, sigma, delta}(r_i)` over `sigma` alone, with the
/// residuals taken at fixed `params`.
pub fn fit_sigma_profile(
    params: &ScalingLawParams,
    data: &Dataset,
    delta: f64,
) -> Result<SigmaProfile> {
    if data.is_empty() {
        return Err(Error::BadInput("sigma profile needs a non-empty dataset".into()));
    }
    let ld = LogData::from_dataset(data)?;
    let residuals = ld.residuals(&params.to_log().as_vector());
    sigma_profile_from_residuals(&residuals, delta)
}

/// Scale-profile likelihood over precomputed residuals.
///
/// The derivative in `log sigma` is `-n + sum psi(r_i/sigma) r_i/sigma`,
/// whose second term is strictly decreasing in `sigma`; the objective is
/// unimodal and golden-section search is safe.
pub fn sigma_profile_from_residuals(residuals: &[f64], delta: f64) -> Result<SigmaProfile> {
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::BadInput(format!("delta must be positive, got {delta}")));
    }
    if residuals.is_empty() {
        return Err(Error::BadInput("sigma profile needs residuals".into()));
    }
    let n = residuals.len() as f64;
    let mean_abs = residuals.iter().map(|r| r.abs()).sum::<f64>() / n;
    if mean_abs == 0.0 {
        return Err(Error::Numerical(
            "all residuals are exactly zero; sigma profile diverges (degenerate)".into(),
        ));
    }
    let log_z = huber_normalizer(delta).ln();
    let ll_at = |ln_sigma: f64| -> f64 {
        let sigma = ln_sigma.exp();
        let mut penalty = 0.0;
        for r in residuals {
            penalty += huber(delta, r / sigma);
        }
        -n * (ln_sigma + log_z) - penalty
    };

    // Bracket around the linear-branch closed form delta * mean|r|.
    let center = (delta * mean_abs).ln();
    let mut lo = center - 12.0;
    let mut hi = center + 12.0;
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = ll_at(x1);
    let mut f2 = ll_at(x2);
    while hi - lo > 1e-10 {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = ll_at(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = ll_at(x1);
        }
    }
    let ln_sigma = 0.5 * (lo + hi);
    Ok(SigmaProfile {
        sigma_hat: ln_sigma.exp(),
        log_likelihood: ll_at(ln_sigma),
        n_observations: residuals.len(),
    })
}

/// Likelihood-ratio test: `2 (ll_alt - ll_null)` referred to chi-squared.
///
/// A negative difference is clamped to zero and flagged; the alternative is
/// supposed to nest the null.
pub fn likelihood_ratio_test(ll_null: f64, ll_alt: f64, dof: usize) -> Result<TestReport> {
    if !ll_null.is_finite() || !ll_alt.is_finite() {
        return Err(Error::BadInput(format!(
            "log-likelihoods must be finite, got ({ll_null}, {ll_alt})"
        )));
    }
    let raw = 2.0 * (ll_alt - ll_null);
    let clamped = raw < 0.0;
    let statistic = raw.max(0.0);
    let p_value = chi_squared_sf(statistic, dof)?;
    let summary = if clamped {
        format!("warning: ll_alt {ll_alt} below ll_null {ll_null}; statistic clamped to 0")
    } else {
        format!("2*(ll_alt - ll_null) with ll_null {ll_null}, ll_alt {ll_alt}")
    };
    Ok(TestReport {
        method: TestMethod::LikelihoodRatio,
        statistic,
        dof: Some(dof),
        p_value,
        summary,
        clamped,
    })
}

/// Multiplicative bias in the data term of the reducible loss introduced by
/// rounding the data exponent: `d^(beta_true - beta_rounded) - 1`.
pub fn rounding_bias(beta_true: f64, beta_rounded: f64, d: f64) -> f64 {
    ((beta_true - beta_rounded) * d.ln()).exp_m1()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RunObservation;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    #[test]
    fn normal_cdf_high_precision_constants() {
        let cases = [
            (0.001, 0.5003989422139110626),
            (1.0, 0.8413447460685429486),
            (2.0, 0.9772498680518207928),
            (-1.96, 0.0249978951482204341),
            (3.0, 0.9986501019683699055),
        ];
        for (x, want) in cases {
            assert_abs_diff_eq!(normal_cdf(x), want, epsilon = 1e-14);
            assert_abs_diff_eq!(normal_sf(x), 1.0 - want, epsilon = 1e-14);
        }
    }

    #[test]
    fn normal_quantile_matches_cdf() {
        let z = normal_quantile(0.9).unwrap();
        assert_abs_diff_eq!(z, 1.281551565544600467, epsilon = 1e-9);
        for p in [0.01, 0.1, 0.5, 0.8, 0.975] {
            assert_abs_diff_eq!(normal_cdf(normal_quantile(p).unwrap()), p, epsilon = 1e-9);
        }
        assert!(normal_quantile(0.0).is_err());
        assert!(normal_quantile(1.5).is_err());
    }

    #[test]
    fn chi_squared_sf_deep_tail() {
        // Pinned against 50-digit evaluations of the regularized upper
        // incomplete gamma function.
        let cases = [
            (83.98, 1.231621119367138e-16),
            (86.74, 3.248840432243425e-17),
            (54.0, 2.0958257982574943e-10),
            (150.59, 9.998451845914087e-31),
            (197.445, 9.998454383655133e-41),
        ];
        for (x, want) in cases {
            let got = chi_squared_sf(x, 5).unwrap();
            assert_relative_eq!(got, want, max_relative = 1e-8);
        }
        assert_eq!(chi_squared_sf(0.0, 5).unwrap(), 1.0);
        assert!(chi_squared_sf(10.0, 5).unwrap() > chi_squared_sf(11.0, 5).unwrap());
        assert!(chi_squared_sf(-1.0, 5).is_err());
        assert!(chi_squared_sf(1.0, 0).is_err());
    }

    #[test]
    fn chi2_equality_identical_vectors() {
        let mu = Vector5::new(1.0, 2.0, 3.0, 0.3, 0.4);
        let sigma = Matrix5::identity() * 0.01;
        let report = chi2_equality_test(&mu, &mu, &sigma).unwrap();
        assert_eq!(report.statistic, 0.0);
        assert_eq!(report.p_value, 1.0);
        assert_eq!(report.dof, Some(5));
        assert_eq!(report.method, TestMethod::Chi2Equality);
    }

    #[test]
    fn chi2_equality_diagonal_hand_computed() {
        let mu = Vector5::new(0.0, 0.0, 0.0, 0.0, 0.0);
        let nu = Vector5::new(0.1, 0.2, 0.0, -0.1, 0.05);
        let mut sigma = Matrix5::zeros();
        let vars = [0.01, 0.04, 0.01, 0.0025, 0.0025];
        for (k, v) in vars.iter().enumerate() {
            sigma[(k, k)] = *v;
        }
        let report = chi2_equality_test(&mu, &nu, &sigma).unwrap();
        let expect = 0.1f64.powi(2) / 0.01
            + 0.2f64.powi(2) / 0.04
            + 0.1f64.powi(2) / 0.0025
            + 0.05f64.powi(2) / 0.0025;
        assert_relative_eq!(report.statistic, expect, max_relative = 1e-12);
        assert_relative_eq!(
            report.p_value,
            chi_squared_sf(expect, 5).unwrap(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn chi2_equality_reparameterization_invariance() {
        let mu = Vector5::new(0.2, -0.4, 1.1, 0.35, 0.37);
        let nu = Vector5::new(0.25, -0.3, 1.0, 0.30, 0.40);
        let mut sigma = Matrix5::identity() * 0.02;
        sigma[(0, 1)] = 0.005;
        sigma[(1, 0)] = 0.005;
        sigma[(3, 4)] = -0.003;
        sigma[(4, 3)] = -0.003;
        let base = chi2_equality_test(&mu, &nu, &sigma).unwrap();

        // A fixed invertible linear map applied consistently.
        let mut t = Matrix5::identity();
        t[(0, 1)] = 0.7;
        t[(1, 2)] = -0.4;
        t[(2, 0)] = 0.2;
        t[(3, 3)] = 2.0;
        t[(4, 0)] = 0.1;
        let mu2 = t * mu;
        let nu2 = t * nu;
        let sigma2 = t * sigma * t.transpose();
        let mapped = chi2_equality_test(&mu2, &nu2, &sigma2).unwrap();
        assert_relative_eq!(mapped.statistic, base.statistic, max_relative = 1e-8);
    }

    #[test]
    fn chi2_equality_rejects_bad_covariance() {
        let mu = Vector5::zeros();
        let nu = Vector5::new(1.0, 0.0, 0.0, 0.0, 0.0);
        // Singular: one zero eigenvalue.
        let mut sigma = Matrix5::identity() * 0.01;
        sigma[(2, 2)] = 0.0;
        assert!(chi2_equality_test(&mu, &nu, &sigma).is_err());
        // Ill-conditioned beyond the guard.
        let mut sigma = Matrix5::identity();
        sigma[(0, 0)] = 1e14;
        sigma[(1, 1)] = 1e-2;
        let err = chi2_equality_test(&mu, &nu, &sigma).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
        // Asymmetric input rejected outright.
        let mut sigma = Matrix5::identity();
        sigma[(0, 1)] = 0.5;
        assert!(chi2_equality_test(&mu, &nu, &sigma).is_err());
    }

    #[test]
    fn z_test_examples() {
        // Identical values: p = 1.
        let same = per_parameter_z_test(1.8172, 1.8172, 0.03).unwrap();
        assert_eq!(same.p_value, 1.0);
        assert_eq!(same.statistic, 0.0);
        // Irreducible-loss difference at SE 0.03; golden from 50-digit erfc.
        let e_test = per_parameter_z_test(1.8172, 1.6934, 0.03).unwrap();
        assert_relative_eq!(e_test.statistic, -4.126666666666667, max_relative = 1e-12);
        assert_relative_eq!(e_test.p_value, 3.6805928402254078e-5, max_relative = 1e-10);
        // Data-exponent difference at SE 0.02.
        let b_test = per_parameter_z_test(0.3658, 0.2849, 0.02).unwrap();
        assert_relative_eq!(b_test.p_value, 5.232312412132832e-5, max_relative = 1e-10);
        // Symmetric in sign.
        let plus = per_parameter_z_test(0.0, 0.5, 0.1).unwrap();
        let minus = per_parameter_z_test(0.0, -0.5, 0.1).unwrap();
        assert_eq!(plus.p_value, minus.p_value);
        assert!(per_parameter_z_test(0.0, 0.1, 0.0).is_err());
    }

    #[test]
    fn percentile_p_values() {
        let samples: Vec<f64> = (0..100).map(|i| i as f64).collect();
        // Reference in the middle: p = 1.
        assert_relative_eq!(bootstrap_percentile_p(&samples, 49.5).unwrap(), 1.0);
        // Reference beyond every sample: floored at 1/n.
        assert_relative_eq!(bootstrap_percentile_p(&samples, 1e6).unwrap(), 0.01);
        // Reference at the 5th percentile: p = 2 * 0.05 = 0.1 roughly.
        let p = bootstrap_percentile_p(&samples, 4.5).unwrap();
        assert_relative_eq!(p, 0.1, max_relative = 1e-12);
    }

    /// Numerically integrate exp(-Huber) with analytic linear-branch tails:
    /// Simpson over the core plus exact tail integrals.
    fn quadrature_normalizer(delta: f64) -> f64 {
        let cut = 10.0f64.max(4.0 * delta);
        let steps = 400_000;
        let h = 2.0 * cut / steps as f64;
        let f = |x: f64| (-huber(delta, x)).exp();
        let mut core = f(-cut) + f(cut);
        for i in 1..steps {
            let x = -cut + i as f64 * h;
            core += f(x) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        core *= h / 3.0;
        // Integral of exp(-delta(x - delta/2)) from cut to infinity.
        let tail = (-delta * (cut - delta / 2.0)).exp() / delta;
        core + 2.0 * tail
    }

    #[test]
    fn normalizer_closed_form_matches_quadrature() {
        let goldens = [
            (1e-3, 2000.0009999999167),
            (0.1, 20.099916749925653),
            (1.0, 2.9243101032095645),
        ];
        for (delta, want) in goldens {
            let z = huber_normalizer(delta);
            assert_relative_eq!(z, want, max_relative = 1e-12);
            assert_relative_eq!(z, quadrature_normalizer(delta), max_relative = 1e-10);
        }
    }

    #[test]
    fn density_integrates_to_one() {
        for sigma in [0.5, 1.0, 2.0] {
            for delta in [1e-3, 0.1, 1.0] {
                let params = HuberDensityParams::new(0.3, sigma, delta).unwrap();
                // Substituting u = (x - mu)/sigma: integral of the scaled
                // density equals the unit-scale integral over u.
                let cut = 10.0f64.max(4.0 * delta);
                let steps = 200_000;
                let h = 2.0 * cut / steps as f64;
                let f = |u: f64| {
                    huber_log_density(params.mu + sigma * u, &params).exp() * sigma
                };
                let mut total = f(-cut) + f(cut);
                for i in 1..steps {
                    let u = -cut + i as f64 * h;
                    total += f(u) * if i % 2 == 1 { 4.0 } else { 2.0 };
                }
                total *= h / 3.0;
                let z = huber_normalizer(delta);
                total += 2.0 * (-delta * (cut - delta / 2.0)).exp() / (delta * z);
                assert_relative_eq!(total, 1.0, max_relative = 1e-8);
            }
        }
    }

    #[test]
    fn log_density_shape() {
        let params = HuberDensityParams::new(1.5, 2.0, 0.1).unwrap();
        // At the location the Huber term vanishes.
        assert_relative_eq!(
            huber_log_density(1.5, &params),
            -params.normalizer().ln() - 2.0f64.ln(),
            max_relative = 1e-14
        );
        // Even around the location.
        for t in [0.3, 1.0, 7.7] {
            assert_relative_eq!(
                huber_log_density(1.5 + t, &params),
                huber_log_density(1.5 - t, &params),
                max_relative = 1e-13
            );
        }
        // Negative log-density minus the constant is exactly the Huber loss.
        let unit = HuberDensityParams::new(0.0, 1.0, 1e-3).unwrap();
        for x in [-2.0, -0.5, 1e-4, 0.3, 5.0] {
            let recovered = -huber_log_density(x, &unit) - unit.normalizer().ln();
            assert_relative_eq!(recovered, huber(1e-3, x), max_relative = 1e-12, epsilon = 1e-15);
        }
        assert!(HuberDensityParams::new(0.0, 0.0, 1e-3).is_err());
        assert!(HuberDensityParams::new(0.0, 1.0, -1.0).is_err());
    }

    /// Dataset with residuals of exactly +-c under `params`.
    fn alternating_residual_dataset(params: &ScalingLawParams, c: f64, n: usize) -> Dataset {
        let mut observations = Vec::new();
        for i in 0..n {
            let nn = 1e8 * (i as f64 + 1.0);
            let dd = 2e10 * (i as f64 + 1.0);
            let pred = params.predict_loss(nn, dd).unwrap();
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            observations.push(RunObservation {
                source_id: format!("r{i}"),
                n_params: nn,
                flop: 6.0 * nn * dd,
                tokens: dd,
                loss: pred * (-sign * c).exp(),
            });
        }
        Dataset::new(observations, "alternating residuals").unwrap()
    }

    #[test]
    fn sigma_profile_linear_branch_closed_form() {
        // With every |r_i| = c far outside the quadratic zone, the optimum
        // is sigma = delta*c and LL = -n (ln(delta c) + ln Z + 1 - delta^2/2).
        let p = ScalingLawParams::new(1.8, 480.0, 2000.0, 0.35, 0.37);
        let c = 0.004;
        let delta = 1e-3;
        let data = alternating_residual_dataset(&p, c, 10);
        let profile = fit_sigma_profile(&p, &data, delta).unwrap();
        assert_relative_eq!(profile.sigma_hat, delta * c, max_relative = 1e-8);
        assert_relative_eq!(profile.log_likelihood, 38.283137373024678, max_relative = 1e-10);
        assert_eq!(profile.n_observations, 10);
    }

    #[test]
    fn sigma_profile_matches_dense_scan() {
        let p = ScalingLawParams::new(1.8, 480.0, 2000.0, 0.35, 0.37);
        let data = alternating_residual_dataset(&p, 0.01, 14);
        let delta = 0.1;
        let profile = fit_sigma_profile(&p, &data, delta).unwrap();
        // Brute-force scan over log sigma as an independent oracle.
        let ld = LogData::from_dataset(&data).unwrap();
        let residuals = ld.residuals(&p.to_log().as_vector());
        let n = residuals.len() as f64;
        let log_z = huber_normalizer(delta).ln();
        let ll = |ln_s: f64| {
            let s = ln_s.exp();
            -n * (ln_s + log_z) - residuals.iter().map(|r| huber(delta, r / s)).sum::<f64>()
        };
        let mut best = f64::NEG_INFINITY;
        let mut best_ln = 0.0;
        let center = profile.sigma_hat.ln();
        for i in 0..=200_000 {
            let ln_s = center - 2.0 + 4.0 * i as f64 / 200_000.0;
            let v = ll(ln_s);
            if v > best {
                best = v;
                best_ln = ln_s;
            }
        }
        assert_relative_eq!(profile.sigma_hat.ln(), best_ln, max_relative = 1e-4);
        assert!(profile.log_likelihood >= best - 1e-9);
    }

    #[test]
    fn sigma_profile_degenerate_zero_residuals() {
        let err = sigma_profile_from_residuals(&[0.0; 8], 1e-3).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
        assert!(sigma_profile_from_residuals(&[], 1e-3).is_err());
        // A single nonzero residual keeps the profile bounded.
        let mut residuals = [0.0; 8];
        residuals[3] = 1e-6;
        assert!(sigma_profile_from_residuals(&residuals, 1e-3).is_ok());
    }

    #[test]
    fn likelihood_ratio_examples() {
        let lr = likelihood_ratio_test(837.78, 879.77, 5).unwrap();
        assert_relative_eq!(lr.statistic, 83.98, max_relative = 1e-12);
        assert_relative_eq!(lr.p_value, 1.231621119367138e-16, max_relative = 1e-8);
        assert!(!lr.clamped);

        let with_outliers = likelihood_ratio_test(714.43, 757.80, 5).unwrap();
        assert_relative_eq!(with_outliers.statistic, 86.74, max_relative = 1e-10);
        assert_relative_eq!(with_outliers.p_value, 3.248840432243425e-17, max_relative = 1e-8);

        let equal = likelihood_ratio_test(100.0, 100.0, 5).unwrap();
        assert_eq!(equal.statistic, 0.0);
        assert_eq!(equal.p_value, 1.0);

        let reversed = likelihood_ratio_test(100.0, 90.0, 5).unwrap();
        assert!(reversed.clamped);
        assert_eq!(reversed.statistic, 0.0);
        assert_eq!(reversed.p_value, 1.0);

        // p monotone decreasing in the gap.
        let small = likelihood_ratio_test(0.0, 5.0, 5).unwrap();
        let large = likelihood_ratio_test(0.0, 6.0, 5).unwrap();
        assert!(large.p_value < small.p_value);
    }

    #[test]
    fn rounding_bias_examples() {
        assert_relative_eq!(rounding_bias(0.2849, 0.28, 1e11), 0.13213964843304111, max_relative = 1e-10);
        assert_eq!(rounding_bias(0.3, 0.3, 1e11), 0.0);
        assert_eq!(rounding_bias(0.9, 0.1, 1.0), 0.0);
        // Rounding down inflates the data term; rounding up deflates it.
        assert!(rounding_bias(0.2849, 0.28, 1e11) > 0.0);
        assert!(rounding_bias(0.28, 0.2849, 1e11) < 0.0);
    }
}
