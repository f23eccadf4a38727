//! Markdown report rendering from a pipeline run directory.
//!
//! The report is built exclusively from artifact files: the renderer
//! verifies every manifest hash, loads the artifacts back from disk, and
//! registers each number it prints together with the artifact it came
//! from. A lint pass then scans the finished markdown and fails if any
//! numeric token lacks a registered source, so nothing can be silently
//! recomputed inline. The only derived quantities are the residual
//! summary statistics, which the design pins to this stage.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::bootstrap::BootstrapResult;
use crate::error::{Error, Result};
use crate::fitter::FitResult;
use crate::model::Aggregation;
use crate::objective::ResidualReport;
use crate::pipeline::{
    LoglikSummary, PipelineManifest, PolicySummary, TestsSummary, BOOTSTRAP_NO_OUTLIERS_JSON,
    BOOTSTRAP_WITH_OUTLIERS_JSON, FIT_NO_OUTLIERS_JSON, FIT_WITH_OUTLIERS_JSON, LOGLIK_JSON,
    MANIFEST_JSON, PLOT_POLICY_BAND_SVG, PLOT_RESIDUALS_OUR_FIT_SVG,
    PLOT_RESIDUALS_REPORTED_SVG, POLICY_JSON, REPORT_MD, RESIDUALS_HOFFMANN_REPORTED_CSV,
    RESIDUALS_OUR_FIT_CSV, TESTS_JSON,
};

/// Tracks every number printed in the report and the artifact it was read
/// from, in the exact formatting used, so the lint pass can check the
/// finished document token by token.
#[derive(Debug, Default)]
pub struct NumberRegistry {
    sources: BTreeMap<String, BTreeSet<String>>,
}

impl NumberRegistry {
    fn track(&mut self, formatted: String, source: &str) -> String {
        for token in number_tokens(&formatted) {
            self.sources.entry(token).or_default().insert(source.to_string());
        }
        formatted
    }

    /// Fixed-point decimal.
    fn fixed(&mut self, value: f64, decimals: usize, source: &str) -> String {
        self.track(format!("{value:.decimals$}"), source)
    }

    /// Shortest scientific form, e.g. `5.88e23`.
    fn sci(&mut self, value: f64, source: &str) -> String {
        self.track(format!("{value:e}"), source)
    }

    /// Two-digit scientific form, e.g. `2.80e-74`.
    fn sci2(&mut self, value: f64, source: &str) -> String {
        self.track(format!("{value:.2e}"), source)
    }

    fn count(&mut self, value: usize, source: &str) -> String {
        self.track(value.to_string(), source)
    }

    /// A value as a percentage with one decimal.
    fn percent(&mut self, fraction: f64, source: &str) -> String {
        self.track(format!("{:.1}", fraction * 100.0), source)
    }

    pub fn sources_for(&self, token: &str) -> Option<&BTreeSet<String>> {
        self.sources.get(token)
    }
}

/// Every numeric token in `text`, skipping digits embedded in identifiers
/// (`run042`, `sha256`). A token is `digits[.digits][e[sign]digits]`, so
/// scientific notation stays in one piece.
pub fn number_tokens(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_ascii_alphabetic() || c == '_' {
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
        } else if c.is_ascii_digit() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            if i + 1 < chars.len() && chars[i] == '.' && chars[i + 1].is_ascii_digit() {
                i += 1;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            tokens.push(chars[start..i].iter().collect());
        } else {
            i += 1;
        }
    }
    tokens
}

/// The report-lint pass: every numeric token in the markdown must have a
/// registered artifact source.
pub fn lint_report(markdown: &str, registry: &NumberRegistry) -> Result<()> {
    for token in number_tokens(markdown) {
        if registry.sources_for(&token).is_none() {
            return Err(Error::BadInput(format!(
                "report lint: the number {token} has no registered artifact source"
            )));
        }
    }
    Ok(())
}

struct Artifacts {
    fit_no: FitResult,
    fit_with: FitResult,
    loglik: LoglikSummary,
    tests: TestsSummary,
    policy: PolicySummary,
    boot_no: Option<BootstrapResult>,
    boot_with: Option<BootstrapResult>,
    res_ours: ResidualReport,
    res_reported: ResidualReport,
}

fn load_artifacts(run_dir: &Path) -> Result<Artifacts> {
    let boot_no_path = run_dir.join(BOOTSTRAP_NO_OUTLIERS_JSON);
    let boot_with_path = run_dir.join(BOOTSTRAP_WITH_OUTLIERS_JSON);
    Ok(Artifacts {
        fit_no: FitResult::from_json_path(run_dir.join(FIT_NO_OUTLIERS_JSON))?,
        fit_with: FitResult::from_json_path(run_dir.join(FIT_WITH_OUTLIERS_JSON))?,
        loglik: LoglikSummary::from_json_path(run_dir.join(LOGLIK_JSON))?,
        tests: TestsSummary::from_json_path(run_dir.join(TESTS_JSON))?,
        policy: PolicySummary::from_json_path(run_dir.join(POLICY_JSON))?,
        boot_no: boot_no_path
            .exists()
            .then(|| BootstrapResult::from_json_path(&boot_no_path))
            .transpose()?,
        boot_with: boot_with_path
            .exists()
            .then(|| BootstrapResult::from_json_path(&boot_with_path))
            .transpose()?,
        res_ours: ResidualReport::from_csv_path(
            run_dir.join(RESIDUALS_OUR_FIT_CSV),
            Aggregation::Sum,
        )?,
        res_reported: ResidualReport::from_csv_path(
            run_dir.join(RESIDUALS_HOFFMANN_REPORTED_CSV),
            Aggregation::Sum,
        )?,
    })
}

/// Goodness-of-fit fractions computed from the two residual artifacts:
/// the share of this run's pointwise Huber losses below the median Huber
/// loss of the reported parameters, and the share of observations on
/// which this run's loss is strictly lower.
fn residual_fractions(ours: &ResidualReport, reported: &ResidualReport) -> Result<(f64, f64)> {
    if ours.source_ids != reported.source_ids {
        return Err(Error::BadInput(
            "residual artifacts cover different observations; cannot compare".into(),
        ));
    }
    let n = ours.huber_losses.len();
    if n == 0 {
        return Err(Error::BadInput("residual artifacts are empty".into()));
    }
    let mut sorted = reported.huber_losses.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let below_median =
        ours.huber_losses.iter().filter(|h| **h < median).count() as f64 / n as f64;
    let pointwise = ours
        .huber_losses
        .iter()
        .zip(&reported.huber_losses)
        .filter(|(a, b)| a < b)
        .count() as f64
        / n as f64;
    Ok((below_median, pointwise))
}

/// Render the markdown report for a finished pipeline run.
///
/// Every artifact hash in the manifest is verified first; a missing or
/// edited artifact aborts the rendering. The returned markdown has passed
/// the lint check.
pub fn render_report(manifest: &PipelineManifest, run_dir: &Path) -> Result<String> {
    manifest.verify(run_dir)?;
    let art = load_artifacts(run_dir)?;
    let mut reg = NumberRegistry::default();
    let mut out = String::new();

    let _ = writeln!(out, "# Scaling-law replication report");
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "All numbers below are read from the run's artifact files, which were \
         verified against the manifest's content hashes before rendering."
    );
    let _ = writeln!(out);

    render_fit_section(&mut out, &mut reg, &art);
    render_loglik_section(&mut out, &mut reg, &art);
    render_tests_section(&mut out, &mut reg, &art);
    render_residual_section(&mut out, &mut reg, &art)?;
    render_policy_section(&mut out, &mut reg, &art);
    render_plots_section(&mut out);
    if art.boot_no.is_none() {
        let _ = writeln!(out, "## Caveats");
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "This run skipped the bootstrap, so the parameter tables have no \
             standard-error column and the equality tests, z-tests, and policy \
             band are omitted."
        );
        let _ = writeln!(out);
    }

    lint_report(&out, &reg)?;
    Ok(out)
}

fn render_fit_section(out: &mut String, reg: &mut NumberRegistry, art: &Artifacts) {
    let _ = writeln!(out, "## Parameter estimates");
    let _ = writeln!(out);
    let kept = reg.count(art.fit_no.n_observations, FIT_NO_OUTLIERS_JSON);
    let dropped = reg.count(art.fit_no.dropped_outliers, FIT_NO_OUTLIERS_JSON);
    let total = reg.count(art.fit_with.n_observations, FIT_WITH_OUTLIERS_JSON);
    let threshold = reg.fixed(art.fit_no.config.outlier_threshold, 1, FIT_NO_OUTLIERS_JSON);
    let starts = reg.count(art.fit_no.total_runs, FIT_NO_OUTLIERS_JSON);
    let delta = reg.fixed(art.fit_no.config.delta, 3, FIT_NO_OUTLIERS_JSON);
    let _ = writeln!(
        out,
        "Each fit minimizes the summed Huber loss (delta = {delta}) of \
         log-loss residuals over a {starts}-start initialization grid. The \
         headline fit keeps {kept} of {total} observations, dropping {dropped} \
         runs whose tokens-per-parameter ratio falls below {threshold}; the \
         second fit keeps everything."
    );
    let _ = writeln!(out);

    let tables = [
        (
            "Outliers dropped",
            &art.fit_no,
            &art.boot_no,
            FIT_NO_OUTLIERS_JSON,
            BOOTSTRAP_NO_OUTLIERS_JSON,
            art.policy.our_exponents.a_policy,
        ),
        (
            "Outliers kept",
            &art.fit_with,
            &art.boot_with,
            FIT_WITH_OUTLIERS_JSON,
            BOOTSTRAP_WITH_OUTLIERS_JSON,
            art.policy.with_outlier_exponents.a_policy,
        ),
    ];
    for (title, fit, boot, source, boot_source, a_policy) in tables {
        let _ = writeln!(out, "### {title}");
        let _ = writeln!(out);
        let p = &fit.params;
        let h = &art.tests.hoffmann_unrounded;
        let a_policy_hoff = art.policy.hoffmann_exponents.a_policy;
        let rows: Vec<(&str, String, String)> = vec![
            ("E", reg.fixed(p.e, 4, source), reg.fixed(h.e, 4, TESTS_JSON)),
            ("A", reg.fixed(p.a, 1, source), reg.fixed(h.a, 1, TESTS_JSON)),
            ("B", reg.fixed(p.b, 1, source), reg.fixed(h.b, 1, TESTS_JSON)),
            ("alpha", reg.fixed(p.alpha, 4, source), reg.fixed(h.alpha, 4, TESTS_JSON)),
            ("beta", reg.fixed(p.beta, 4, source), reg.fixed(h.beta, 4, TESTS_JSON)),
            (
                "a_policy",
                reg.fixed(a_policy, 4, POLICY_JSON),
                reg.fixed(a_policy_hoff, 4, POLICY_JSON),
            ),
        ];
        match boot {
            Some(b) => {
                let ses = [
                    p.e * b.standard_errors[2],
                    p.a * b.standard_errors[0],
                    p.b * b.standard_errors[1],
                    b.standard_errors[3],
                    b.standard_errors[4],
                    b.a_policy.se,
                ];
                let se_dec = [4, 1, 1, 4, 4, 4];
                let _ = writeln!(out, "| Parameter | This run | SE | Hoffmann et al. (unrounded) |");
                let _ = writeln!(out, "|---|---|---|---|");
                for ((name, ours, hoff), (se, dec)) in
                    rows.iter().zip(ses.iter().zip(se_dec.iter()))
                {
                    let se = reg.fixed(*se, *dec, boot_source);
                    let _ = writeln!(out, "| {name} | {ours} | {se} | {hoff} |");
                }
            }
            None => {
                let _ = writeln!(out, "| Parameter | This run | Hoffmann et al. (unrounded) |");
                let _ = writeln!(out, "|---|---|---|");
                for (name, ours, hoff) in &rows {
                    let _ = writeln!(out, "| {name} | {ours} | {hoff} |");
                }
            }
        }
        let _ = writeln!(out);
    }
}

fn render_loglik_section(out: &mut String, reg: &mut NumberRegistry, art: &Artifacts) {
    let _ = writeln!(out, "## Log-likelihood ladder");
    let _ = writeln!(out);
    let ll = &art.loglik;
    let n_no = reg.count(ll.no_outliers.n_observations, LOGLIK_JSON);
    let n_with = reg.count(ll.with_outliers.n_observations, LOGLIK_JSON);
    let _ = writeln!(
        out,
        "Profile log-likelihoods under the Huber error density, per parameter \
         set, on the screened ({n_no} observations) and full ({n_with} \
         observations) datasets."
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "| Parameters | Outliers dropped | Outliers kept |");
    let _ = writeln!(out, "|---|---|---|");
    let rows = [
        ("Hoffmann et al. as printed", ll.no_outliers.reported, ll.with_outliers.reported),
        ("Hoffmann et al. unrounded", ll.no_outliers.unrounded, ll.with_outliers.unrounded),
        ("This run's fit", ll.no_outliers.our_fit, ll.with_outliers.our_fit),
    ];
    for (name, no, with) in rows {
        let no = reg.fixed(no, 2, LOGLIK_JSON);
        let with = reg.fixed(with, 2, LOGLIK_JSON);
        let _ = writeln!(out, "| {name} | {no} | {with} |");
    }
    let _ = writeln!(out);
    let gap_rounding = reg.fixed(ll.gap_unrounded_over_reported, 2, LOGLIK_JSON);
    let gap_fit = reg.fixed(ll.gap_our_fit_over_unrounded, 2, LOGLIK_JSON);
    let _ = writeln!(
        out,
        "In the screened column, undoing the printed rounding recovers \
         {gap_rounding} nats, and refitting adds another {gap_fit} nats."
    );
    let stat = reg.fixed(ll.lrt.statistic, 2, LOGLIK_JSON);
    let p = reg.sci2(ll.lrt.p_value, LOGLIK_JSON);
    let dof = reg.count(ll.lrt.dof.unwrap_or(0), LOGLIK_JSON);
    let _ = writeln!(
        out,
        "A likelihood-ratio test of the unrounded parameters against this \
         run's fit gives a statistic of {stat} on {dof} degrees of freedom \
         (p = {p})."
    );
    let _ = writeln!(out);
}

fn render_tests_section(out: &mut String, reg: &mut NumberRegistry, art: &Artifacts) {
    let _ = writeln!(out, "## Hypothesis tests");
    let _ = writeln!(out);
    let t = &art.tests;
    if let (Some(chi_no), Some(chi_with)) = (&t.chi2_no_outliers, &t.chi2_with_outliers) {
        let dof = reg.count(chi_no.dof.unwrap_or(0), TESTS_JSON);
        let s_no = reg.fixed(chi_no.statistic, 1, TESTS_JSON);
        let p_no = reg.sci2(chi_no.p_value, TESTS_JSON);
        let s_with = reg.fixed(chi_with.statistic, 1, TESTS_JSON);
        let p_with = reg.sci2(chi_with.p_value, TESTS_JSON);
        let _ = writeln!(
            out,
            "The joint equality test against the unrounded Hoffmann et al. \
             parameters (chi-squared, {dof} degrees of freedom) rejects in \
             both configurations: statistic {s_no} (p = {p_no}) with outliers \
             dropped, {s_with} (p = {p_with}) with outliers kept."
        );
        let _ = writeln!(out);
    }
    if let (Some(z_no), Some(z_with)) = (&t.z_no_outliers, &t.z_with_outliers) {
        let _ = writeln!(
            out,
            "Per-parameter z-tests against the same values (positive z means \
             this run's estimate is higher):"
        );
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "| Parameter | z (outliers dropped) | p | z (outliers kept) | p |"
        );
        let _ = writeln!(out, "|---|---|---|---|---|");
        for (name, a, b) in [
            ("E", &z_no.e, &z_with.e),
            ("alpha", &z_no.alpha, &z_with.alpha),
            ("beta", &z_no.beta, &z_with.beta),
        ] {
            let za = reg.fixed(a.statistic, 2, TESTS_JSON);
            let pa = reg.sci2(a.p_value, TESTS_JSON);
            let zb = reg.fixed(b.statistic, 2, TESTS_JSON);
            let pb = reg.sci2(b.p_value, TESTS_JSON);
            let _ = writeln!(out, "| {name} | {za} | {pa} | {zb} | {pb} |");
        }
        let _ = writeln!(out);
    }
    let rb = &t.rounding_bias;
    let from = reg.fixed(rb.beta_true, 4, TESTS_JSON);
    let to = reg.fixed(rb.beta_rounded, 2, TESTS_JSON);
    let d = reg.sci(rb.tokens, TESTS_JSON);
    let pct = reg.percent(rb.relative_bias, TESTS_JSON);
    let _ = writeln!(
        out,
        "Rounding the data exponent from {from} to {to}, as the printed table \
         does, inflates the implied data term at {d} tokens by {pct}%."
    );
    let _ = writeln!(out);
}

fn render_residual_section(
    out: &mut String,
    reg: &mut NumberRegistry,
    art: &Artifacts,
) -> Result<()> {
    let _ = writeln!(out, "## Residual diagnostics");
    let _ = writeln!(out);
    let res_src = RESIDUALS_OUR_FIT_CSV;
    let rep_src = RESIDUALS_HOFFMANN_REPORTED_CSV;
    let both = "the residual artifacts";
    let (mean_ours, se_ours) = art.res_ours.mean_and_se();
    let (mean_rep, se_rep) = art.res_reported.mean_and_se();
    let m_ours = reg.fixed(mean_ours, 5, res_src);
    let s_ours = reg.fixed(se_ours, 5, res_src);
    let m_rep = reg.fixed(mean_rep, 5, rep_src);
    let s_rep = reg.fixed(se_rep, 5, rep_src);
    let pull = reg.fixed(mean_rep / se_rep, 1, rep_src);
    let _ = writeln!(
        out,
        "On the screened observations, this run's residuals (predicted minus \
         observed log loss) average {m_ours} nats (standard error {s_ours}), \
         consistent with zero. Under the Hoffmann et al. parameters as \
         printed, the average residual is {m_rep} nats (standard error \
         {s_rep}), {pull} standard errors above zero: the printed law \
         systematically overpredicts the loss of these runs."
    );
    let _ = writeln!(out);
    let (below_median, pointwise) = residual_fractions(&art.res_ours, &art.res_reported)?;
    let f_med = reg.percent(below_median, both);
    let f_point = reg.percent(pointwise, both);
    let _ = writeln!(
        out,
        "{f_med}% of this run's pointwise Huber losses are smaller than the \
         median Huber loss under the printed parameters, and this run fits \
         better on {f_point}% of observations."
    );
    let _ = writeln!(out);
    Ok(())
}

fn render_policy_section(out: &mut String, reg: &mut NumberRegistry, art: &Artifacts) {
    let _ = writeln!(out, "## Compute-optimal allocation");
    let _ = writeln!(out);
    let p = &art.policy;
    let c_eval = reg.sci(p.eval_compute, POLICY_JSON);
    let ours = reg.fixed(p.our_allocation.ratio, 1, POLICY_JSON);
    let hoff = reg.fixed(p.hoffmann_allocation.ratio, 1, POLICY_JSON);
    let n_ours = reg.sci2(p.our_allocation.n_opt, POLICY_JSON);
    let d_ours = reg.sci2(p.our_allocation.d_opt, POLICY_JSON);
    let a_ours = reg.fixed(p.our_exponents.a_policy, 4, POLICY_JSON);
    let a_hoff = reg.fixed(p.hoffmann_exponents.a_policy, 4, POLICY_JSON);
    let _ = writeln!(
        out,
        "At a budget of {c_eval} FLOP, this run's law allocates {n_ours} \
         parameters and {d_ours} tokens, i.e. {ours} tokens per parameter, \
         against {hoff} under the unrounded Hoffmann et al. parameters. \
         Optimal model size scales as compute to the power {a_ours} under \
         this run's law and {a_hoff} under theirs."
    );
    let _ = writeln!(out);
    if let Some(band) = &p.band {
        if let (Some(lo), Some(hi)) = (band.ratio_lo, band.ratio_hi) {
            let cov = reg.track(format!("{:.0}", p.coverage * 100.0), POLICY_JSON);
            let c_band = reg.sci(p.band_compute, POLICY_JSON);
            let lo = reg.fixed(lo, 1, POLICY_JSON);
            let hi = reg.fixed(hi, 1, POLICY_JSON);
            let _ = writeln!(
                out,
                "The {cov}% bootstrap band for the optimal ratio at {c_band} \
                 FLOP spans {lo} to {hi} tokens per parameter."
            );
            let _ = writeln!(out);
        }
    }
}

fn render_plots_section(out: &mut String) {
    let _ = writeln!(out, "## Plots");
    let _ = writeln!(out);
    let _ = writeln!(out, "![Residuals of this run's fit]({PLOT_RESIDUALS_OUR_FIT_SVG})");
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "![Residuals of the Hoffmann et al. printed parameters]({PLOT_RESIDUALS_REPORTED_SVG})"
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "![Compute-optimal tokens per parameter]({PLOT_POLICY_BAND_SVG})");
    let _ = writeln!(out);
}

/// Load the manifest from `run_dir`, render the report, and write
/// `report.md` next to the artifacts. Returns the report path.
pub fn render_report_to_path(run_dir: &Path) -> Result<PathBuf> {
    let manifest = PipelineManifest::from_json_path(run_dir.join(MANIFEST_JSON))?;
    let text = render_report(&manifest, run_dir)?;
    let path = run_dir.join(REPORT_MD);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
