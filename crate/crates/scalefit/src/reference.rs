//! Bundled reference figure and dataset.
//!
//! The crate ships a synthetic isoFLOP scatter figure patterned on the
//! Chinchilla training-run data of Hoffmann et al. (2022): 245 runs across
//! ten compute levels between 6e18 and 3e21 FLOP, losses encoded through a
//! 256-color logarithmic ramp, plus five deliberately undertrained runs
//! near 1e19 FLOP whose losses sit well above the law (the "outliers").
//!
//! Every byte is reproducible: runs are drawn from a frozen seed, losses
//! are quantized to the color ramp before rendering, and the figure is a
//! pure function of the run list. [`REFERENCE_FIGURE_SVG`] embeds the
//! rendered figure; a test regenerates it and checks byte equality.
//!
//! The generating law is a refit of the Chinchilla data; the noise scale
//! and run placement are chosen so the extracted dataset exercises every
//! stage of the toolkit with realistic magnitudes: robust fitting, outlier
//! screening, likelihood comparisons against the original Hoffmann et al.
//! estimates, bootstrap uncertainty, and allocation policy curves.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::extract::figure::ramp_strip;
use crate::extract::{
    extract_figure, generate_synthetic_figure, ColorScale, ExtractConfig, Extraction, FigureLayout,
};
use crate::model::{Dataset, RunObservation, ScalingLawParams};

/// The law the bundled runs are drawn from, a full-data refit of the
/// Chinchilla training runs: L(N, D) = E + A/N^alpha + B/D^beta.
pub const GENERATING_PARAMS: ScalingLawParams =
    ScalingLawParams { e: 1.8172, a: 482.01, b: 2085.43, alpha: 0.3478, beta: 0.3658 };

/// Hoffmann et al. (2022) Approach 3 estimates at full precision, as
/// recovered from the authors' published notebooks.
pub const HOFFMANN_UNROUNDED: ScalingLawParams =
    ScalingLawParams { e: 1.6934, a: 406.4, b: 410.7, alpha: 0.3392, beta: 0.2849 };

/// The same estimates as printed in the Hoffmann et al. (2022) text, with
/// the exponents rounded to two decimals.
pub const HOFFMANN_REPORTED: ScalingLawParams =
    ScalingLawParams { e: 1.69, a: 406.4, b: 410.7, alpha: 0.34, beta: 0.28 };

/// Seed for the run generator (ChaCha8, one normal draw per run).
pub const REFERENCE_SEED: u64 = 38;

/// Multiplicative log-normal noise scale on loss.
pub const NOISE_SIGMA: f64 = 0.00758;

/// Additive ln-loss offset applied to the five undertrained outlier runs.
pub const OUTLIER_OFFSET: f64 = 0.085;

/// Compute level shared by the five outlier runs, in FLOP.
pub const OUTLIER_COMPUTE: f64 = 1e19;

/// Parameter counts of the five outlier runs. At 1e19 FLOP these all sit
/// below 0.4 tokens per parameter, the screening threshold.
pub const OUTLIER_N_PARAMS: [f64; 5] = [2.2e9, 2.9e9, 3.8e9, 5.0e9, 6.6e9];

/// The rendered reference figure, embedded at compile time.
pub const REFERENCE_FIGURE_SVG: &str = include_str!("../assets/reference_figure.svg");

const LEVELS: usize = 10;
const PER_LEVEL: usize = 24;
const C_LO_LOG10: f64 = 18.778151250383644; // log10(6e18)
const C_HI_LOG10: f64 = 21.477121254719663; // log10(3e21)
const RATIO_FLOOR_LOG10: f64 = -0.3467874862246563; // log10(0.45)
const STRIPE_LEVELS: usize = 6;
const STRIPE_COUNT: usize = 16;

/// Ratio spans (log10 lo, log10 hi, count) for one compute level.
///
/// Each level carries a main span tracking the compute-optimal ridge, and
/// the six lowest levels add an undertrained stripe below one token per
/// parameter, mirroring the density of small-compute sweeps in the
/// original figure.
fn level_spans(level: usize, x: f64) -> Vec<(f64, f64, usize)> {
    let ctr = 10.2 - 0.456 * x;
    let core_lo = (ctr - 0.45).max(RATIO_FLOOR_LOG10);
    let core_hi = ctr + 0.30;
    if level < STRIPE_LEVELS {
        let qe = 21.37 - 1.1 * x;
        let s_lo = (qe - 0.30).max(RATIO_FLOOR_LOG10);
        let s_hi = (qe + 0.30).max(RATIO_FLOOR_LOG10 + 0.12);
        vec![(core_lo, core_hi, PER_LEVEL - STRIPE_COUNT), (s_lo, s_hi, STRIPE_COUNT)]
    } else {
        vec![(core_lo, core_hi, PER_LEVEL)]
    }
}

/// The color scale used to quantize losses before rendering, identical to
/// the strip [`generate_synthetic_figure`] embeds in the figure.
fn quantizing_scale() -> ColorScale {
    let strip = ramp_strip(256);
    ColorScale::from_strip(&strip, 2.0, 5.0, true).expect("reference ramp is a valid scale")
}

/// Synthesize the 245 reference runs.
///
/// Deterministic: a fixed seed, one standard-normal draw per run in a fixed
/// order. Losses are snapped to the 256-entry color scale so that a figure
/// round trip reproduces them bit for bit.
pub fn reference_runs() -> Vec<RunObservation> {
    let scale = quantizing_scale();
    let mut rng = ChaCha8Rng::seed_from_u64(REFERENCE_SEED);
    let mut runs = Vec::with_capacity(LEVELS * PER_LEVEL + OUTLIER_N_PARAMS.len());
    let mut idx = 0usize;
    for level in 0..LEVELS {
        let x = C_LO_LOG10 + (C_HI_LOG10 - C_LO_LOG10) * level as f64 / (LEVELS - 1) as f64;
        let compute = 10f64.powf(x);
        for (lo, hi, count) in level_spans(level, x) {
            for j in 0..count {
                let t = j as f64 / (count - 1) as f64;
                let ratio = 10f64.powf(lo + t * (hi - lo));
                let n = (compute / (6.0 * ratio)).sqrt();
                let d = compute / (6.0 * n);
                let z: f64 = rng.sample(StandardNormal);
                let mean = GENERATING_PARAMS.predict_loss(n, d).expect("valid law");
                let raw = (mean.ln() + NOISE_SIGMA * z).exp();
                let loss = scale.entry_for_value(raw).expect("loss in scale range").value;
                runs.push(RunObservation {
                    source_id: format!("run{idx:03}"),
                    n_params: n,
                    flop: compute,
                    tokens: d,
                    loss,
                });
                idx += 1;
            }
        }
    }
    for &n in OUTLIER_N_PARAMS.iter() {
        let d = OUTLIER_COMPUTE / (6.0 * n);
        let z: f64 = rng.sample(StandardNormal);
        let mean = GENERATING_PARAMS.predict_loss(n, d).expect("valid law");
        let raw = (mean.ln() + OUTLIER_OFFSET + NOISE_SIGMA * z).exp();
        let loss = scale.entry_for_value(raw).expect("outlier loss in scale range").value;
        runs.push(RunObservation {
            source_id: format!("run{idx:03}"),
            n_params: n,
            flop: OUTLIER_COMPUTE,
            tokens: d,
            loss,
        });
        idx += 1;
    }
    runs
}

/// The synthesized runs as a [`Dataset`], before any figure round trip.
pub fn reference_source_dataset() -> Result<Dataset> {
    Dataset::new(reference_runs(), "reference synthesis (seed 38)")
}

/// Figure layout for the reference dataset.
pub fn reference_layout() -> Result<FigureLayout> {
    FigureLayout::for_dataset(&reference_source_dataset()?)
}

/// Render the reference figure from the synthesized runs.
///
/// [`REFERENCE_FIGURE_SVG`] holds this exact string; regenerating must be
/// byte-identical.
pub fn render_reference_figure() -> Result<String> {
    let ds = reference_source_dataset()?;
    let layout = FigureLayout::for_dataset(&ds)?;
    generate_synthetic_figure(&ds, &layout)
}

/// Extraction config matching the bundled figure's layout.
pub fn reference_extract_config() -> Result<ExtractConfig> {
    Ok(ExtractConfig::for_layout(&reference_layout()?))
}

/// Extract the bundled figure, returning the dataset plus diagnostics.
///
/// This is the dataset of record: every downstream number in the bundled
/// analysis (fits, tests, policy curves) starts from this extraction, not
/// from the pre-render run list. Losses survive the round trip exactly;
/// axis coordinates reacquire with about 1e-6 relative error.
pub fn extract_reference_figure() -> Result<Extraction> {
    extract_figure(REFERENCE_FIGURE_SVG, &reference_extract_config()?)
}

/// The reference dataset: the bundled figure, extracted.
pub fn reference_dataset() -> Result<Dataset> {
    Ok(extract_reference_figure()?.dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_list_shape() {
        let runs = reference_runs();
        assert_eq!(runs.len(), 245);
        // ids are sequential and unique
        for (i, r) in runs.iter().enumerate() {
            assert_eq!(r.source_id, format!("run{i:03}"));
        }
    }

    #[test]
    fn exactly_five_outliers_below_threshold() {
        let ds = reference_source_dataset().unwrap();
        let (kept, dropped) = ds.partition_outliers(0.4);
        assert_eq!(kept.len(), 240);
        assert_eq!(dropped.len(), 5);
        for o in &dropped.observations {
            assert_eq!(o.flop, OUTLIER_COMPUTE);
            assert!(o.tokens_per_param() < 0.4);
        }
        // regular runs stay clear of the screening threshold
        for o in &kept.observations {
            assert!(o.tokens_per_param() > 0.44);
        }
    }

    #[test]
    fn losses_are_snapped_to_the_scale() {
        let scale = quantizing_scale();
        for r in reference_runs() {
            let snapped = scale.entry_for_value(r.loss).unwrap().value;
            assert_eq!(r.loss, snapped, "{} not on the color grid", r.source_id);
        }
    }

    #[test]
    fn bundled_figure_matches_regeneration() {
        let rendered = render_reference_figure().unwrap();
        assert_eq!(
            rendered, REFERENCE_FIGURE_SVG,
            "bundled reference_figure.svg is stale; regenerate it with the \
             generate_figure example"
        );
    }

    #[test]
    fn extraction_round_trip_is_faithful() {
        let src = reference_runs();
        let ds = reference_dataset().unwrap();
        assert_eq!(ds.len(), src.len());
        for (a, b) in src.iter().zip(ds.observations.iter()) {
            assert_eq!(a.source_id, b.source_id);
            // losses are exact because both sides share the quantizing scale
            assert_eq!(a.loss, b.loss, "{}", a.source_id);
            assert!((a.n_params / b.n_params - 1.0).abs() < 1e-4, "{}", a.source_id);
            assert!((a.flop / b.flop - 1.0).abs() < 1e-4, "{}", a.source_id);
            assert!((a.tokens / b.tokens - 1.0).abs() < 2e-4, "{}", a.source_id);
        }
    }

    #[test]
    fn generating_law_predicts_reasonable_losses() {
        // spot values bracket the observed loss range of the figure
        let lo = GENERATING_PARAMS.predict_loss(1e11, 1e13).unwrap();
        let hi = GENERATING_PARAMS.predict_loss(1e7, 1e8).unwrap();
        assert!(lo > 1.8172 && lo < 2.2, "floor end: {lo}");
        assert!(hi > 4.0, "small-model end: {hi}");
    }
}
