//! Figure-level extraction: configuration, the decode pipeline from raw
//! points to a Dataset, and a synthetic figure generator that makes the
//! whole extractor testable without the original figure.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::axis::{AxisCalibration, AxisScale};
use crate::extract::color::{ColorScale, RgbColor, DEFAULT_VALUE_MAX, DEFAULT_VALUE_MIN};
use crate::extract::svg::{
    harvest_axis_labels, harvest_scale_strip, parse_svg_points, ExtractedPoint, LabelAxis,
};
use crate::model::{tokens_from_flop, Dataset, RunObservation, DEFAULT_FLOP_PER_PARAM_TOKEN,
    DEFAULT_OUTLIER_THRESHOLD};

fn default_points_selector() -> String {
    "scatter-points".into()
}
fn default_x_labels_selector() -> String {
    "x-axis-labels".into()
}
fn default_y_labels_selector() -> String {
    "y-axis-labels".into()
}
fn default_scale_selector() -> String {
    "color-scale".into()
}
fn default_value_min() -> f64 {
    DEFAULT_VALUE_MIN
}
fn default_value_max() -> f64 {
    DEFAULT_VALUE_MAX
}
fn default_outlier_threshold() -> f64 {
    DEFAULT_OUTLIER_THRESHOLD
}
fn default_flop_per_param_token() -> f64 {
    DEFAULT_FLOP_PER_PARAM_TOKEN
}

/// Extraction configuration (TOML or JSON). The color-scale orientation has
/// no default: it must be stated explicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractConfig {
    #[serde(default = "default_points_selector")]
    pub points_selector: String,
    #[serde(default = "default_x_labels_selector")]
    pub x_labels_selector: String,
    #[serde(default = "default_y_labels_selector")]
    pub y_labels_selector: String,
    #[serde(default = "default_scale_selector")]
    pub scale_selector: String,
    #[serde(default = "default_value_min")]
    pub value_min: f64,
    #[serde(default = "default_value_max")]
    pub value_max: f64,
    /// Required: which end of the color bar carries `value_max`.
    #[serde(default)]
    pub scale_top_is_max: Option<bool>,
    #[serde(default)]
    pub x_label_offsets: BTreeMap<String, f64>,
    #[serde(default)]
    pub y_label_offsets: BTreeMap<String, f64>,
    #[serde(default = "default_outlier_threshold")]
    pub outlier_threshold: f64,
    #[serde(default = "default_flop_per_param_token")]
    pub flop_per_param_token: f64,
    #[serde(default)]
    pub provenance: Option<String>,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            points_selector: default_points_selector(),
            x_labels_selector: default_x_labels_selector(),
            y_labels_selector: default_y_labels_selector(),
            scale_selector: default_scale_selector(),
            value_min: default_value_min(),
            value_max: default_value_max(),
            scale_top_is_max: None,
            x_label_offsets: BTreeMap::new(),
            y_label_offsets: BTreeMap::new(),
            outlier_threshold: default_outlier_threshold(),
            flop_per_param_token: default_flop_per_param_token(),
            provenance: None,
        }
    }
}

impl ExtractConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale_top_is_max.is_none() {
            return Err(Error::BadInput(
                "scale_top_is_max must be set explicitly; the orientation is never guessed".into(),
            ));
        }
        if !(self.value_min > 0.0 && self.value_min < self.value_max) {
            return Err(Error::BadInput(format!(
                "need 0 < value_min < value_max, got [{}, {}]",
                self.value_min, self.value_max
            )));
        }
        if self.outlier_threshold < 0.0 {
            return Err(Error::BadInput(format!(
                "outlier threshold must be >= 0, got {}",
                self.outlier_threshold
            )));
        }
        if !(self.flop_per_param_token > 0.0) {
            return Err(Error::BadInput(format!(
                "flop_per_param_token must be positive, got {}",
                self.flop_per_param_token
            )));
        }
        Ok(())
    }

    /// Load from a `.toml` or `.json` file.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: Self = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text)?,
            Some("json") => serde_json::from_str(&text)?,
            other => {
                return Err(Error::BadInput(format!(
                    "config must be .toml or .json, got extension {other:?} for {}",
                    path.display()
                )))
            }
        };
        config.validate()?;
        Ok(config)
    }

    /// A config whose selectors and scale settings match a generated figure.
    pub fn for_layout(layout: &FigureLayout) -> Self {
        Self {
            value_min: layout.value_min,
            value_max: layout.value_max,
            scale_top_is_max: Some(layout.top_is_max),
            ..Self::default()
        }
    }
}

/// Extraction diagnostics persisted alongside the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionReport {
    pub n_points: usize,
    /// Fill colors shared by more than one point, with use counts.
    pub duplicate_fills: Vec<(String, usize)>,
    pub max_color_distance: f64,
    pub mean_color_distance: f64,
    pub x_axis_residual: f64,
    pub y_axis_residual: f64,
    pub scale_entries: usize,
    pub value_min: f64,
    pub value_max: f64,
    pub top_is_max: bool,
}

impl ExtractionReport {
    pub fn to_json_path(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn from_json_path(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}

/// A decoded figure: the dataset plus per-point detail and diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub dataset: Dataset,
    pub points: Vec<ExtractedPoint>,
    pub report: ExtractionReport,
}

/// Apply calibrations and color lookup to raw points.
pub fn decode_points(
    raw: &[ExtractedPoint],
    x_axis: &AxisCalibration,
    y_axis: &AxisCalibration,
    scale: &ColorScale,
    flop_per_param_token: f64,
    provenance: &str,
) -> Result<Extraction> {
    let mut points = Vec::with_capacity(raw.len());
    let mut observations = Vec::with_capacity(raw.len());
    let mut offenders = Vec::new();
    let mut fill_counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut max_distance = 0.0f64;
    let mut distance_sum = 0.0f64;
    for (index, point) in raw.iter().enumerate() {
        let source_id = point
            .shape_id
            .clone()
            .unwrap_or_else(|| format!("pt{index:03}"));
        let flop = x_axis.value_at(point.svg_x);
        let n_params = y_axis.value_at(point.svg_y);
        let (loss, distance, _) = scale.lookup(&point.fill_hex)?;
        *fill_counts.entry(point.fill_hex.as_str()).or_insert(0) += 1;
        max_distance = max_distance.max(distance);
        distance_sum += distance;
        if !(flop.is_finite() && flop > 0.0 && n_params.is_finite() && n_params > 0.0) {
            offenders.push(format!("{source_id}: non-finite decode (N {n_params}, C {flop})"));
            continue;
        }
        // One color step of slack around the scale bounds.
        let epsilon = scale.value_max * scale.log_step();
        if !(loss >= scale.value_min - epsilon && loss <= scale.value_max + epsilon) {
            offenders.push(format!("{source_id}: loss {loss} outside scale bounds"));
            continue;
        }
        let tokens = match tokens_from_flop(flop, n_params, flop_per_param_token) {
            Ok(t) => t,
            Err(e) => {
                offenders.push(format!("{source_id}: {e}"));
                continue;
            }
        };
        let mut decoded = point.clone();
        decoded.n_params = Some(n_params);
        decoded.flop = Some(flop);
        decoded.loss = Some(loss);
        decoded.color_distance = Some(distance);
        points.push(decoded);
        observations.push(RunObservation { source_id, n_params, flop, tokens, loss });
    }
    if !offenders.is_empty() {
        return Err(Error::BadInput(format!(
            "{} point(s) failed to decode: {}",
            offenders.len(),
            offenders.join("; ")
        )));
    }
    let duplicate_fills: Vec<(String, usize)> = fill_counts
        .into_iter()
        .filter(|(_, count)| *count > 1)
        .map(|(hex, count)| (hex.to_string(), count))
        .collect();
    let n = raw.len();
    let report = ExtractionReport {
        n_points: n,
        duplicate_fills,
        max_color_distance: max_distance,
        mean_color_distance: if n == 0 { 0.0 } else { distance_sum / n as f64 },
        x_axis_residual: x_axis.max_residual,
        y_axis_residual: y_axis.max_residual,
        scale_entries: scale.entries.len(),
        value_min: scale.value_min,
        value_max: scale.value_max,
        top_is_max: scale.top_is_max,
    };
    let dataset = Dataset::new(observations, provenance)?;
    Ok(Extraction { dataset, points, report })
}

/// Full extraction from SVG text under a config.
pub fn extract_figure(svg_text: &str, config: &ExtractConfig) -> Result<Extraction> {
    config.validate()?;
    let raw = parse_svg_points(svg_text, &config.points_selector)?;
    let x_labels = harvest_axis_labels(svg_text, &config.x_labels_selector, LabelAxis::X)?;
    let y_labels = harvest_axis_labels(svg_text, &config.y_labels_selector, LabelAxis::Y)?;
    let x_axis =
        AxisCalibration::from_labels(&x_labels, AxisScale::Log10, &config.x_label_offsets)?;
    let y_axis =
        AxisCalibration::from_labels(&y_labels, AxisScale::Log10, &config.y_label_offsets)?;
    let strip = harvest_scale_strip(svg_text, &config.scale_selector)?;
    let scale = ColorScale::from_strip(
        &strip,
        config.value_min,
        config.value_max,
        config.scale_top_is_max.expect("validated above"),
    )?;
    let provenance = config
        .provenance
        .clone()
        .unwrap_or_else(|| "extracted from SVG figure".to_string());
    decode_points(&raw, &x_axis, &y_axis, &scale, config.flop_per_param_token, &provenance)
}

/// Convenience: extract straight from a file path.
pub fn extract_figure_path(path: &Path, config: &ExtractConfig) -> Result<Extraction> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    extract_figure(&text, config)
}

/// Geometry and scale settings for the synthetic figure generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureLayout {
    pub width: f64,
    pub height: f64,
    pub margin_left: f64,
    pub margin_right: f64,
    pub margin_top: f64,
    pub margin_bottom: f64,
    /// FLOP values labeled on the x axis.
    pub x_anchors: Vec<f64>,
    /// Parameter-count values labeled on the y axis.
    pub y_anchors: Vec<f64>,
    pub scale_cells: usize,
    pub top_is_max: bool,
    pub value_min: f64,
    pub value_max: f64,
    pub point_radius: f64,
}

impl Default for FigureLayout {
    fn default() -> Self {
        Self {
            width: 880.0,
            height: 600.0,
            margin_left: 80.0,
            margin_right: 140.0,
            margin_top: 40.0,
            margin_bottom: 70.0,
            x_anchors: vec![1e18, 1e19, 1e20, 1e21],
            y_anchors: vec![1e8, 1e9, 1e10],
            scale_cells: 256,
            top_is_max: true,
            value_min: DEFAULT_VALUE_MIN,
            value_max: DEFAULT_VALUE_MAX,
            point_radius: 3.0,
        }
    }
}

fn decade_anchors(min: f64, max: f64) -> Vec<f64> {
    let mut lo = min.log10().floor() as i32;
    let mut hi = max.log10().ceil() as i32;
    if lo == hi {
        lo -= 1;
        hi += 1;
    }
    let step = 1 + ((hi - lo) as usize) / 12;
    (lo..=hi)
        .step_by(step)
        .map(|e| 10f64.powi(e))
        .collect()
}

impl FigureLayout {
    /// Layout with decade anchors spanning the dataset's FLOP and
    /// parameter ranges.
    pub fn for_dataset(dataset: &Dataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::BadInput("cannot lay out a figure for an empty dataset".into()));
        }
        let obs = &dataset.observations;
        let flop_min = obs.iter().map(|o| o.flop).fold(f64::INFINITY, f64::min);
        let flop_max = obs.iter().map(|o| o.flop).fold(f64::NEG_INFINITY, f64::max);
        let n_min = obs.iter().map(|o| o.n_params).fold(f64::INFINITY, f64::min);
        let n_max = obs.iter().map(|o| o.n_params).fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            x_anchors: decade_anchors(flop_min, flop_max),
            y_anchors: decade_anchors(n_min, n_max),
            ..Self::default()
        })
    }

    fn validate(&self) -> Result<()> {
        if self.x_anchors.len() < 2 || self.y_anchors.len() < 2 {
            return Err(Error::BadInput("layout needs at least 2 anchors per axis".into()));
        }
        if !(self.scale_cells >= 2 && self.scale_cells <= 256) {
            return Err(Error::BadInput(format!(
                "scale_cells must be in 2..=256, got {}",
                self.scale_cells
            )));
        }
        if !(self.value_min > 0.0 && self.value_min < self.value_max) {
            return Err(Error::BadInput(format!(
                "need 0 < value_min < value_max, got [{}, {}]",
                self.value_min, self.value_max
            )));
        }
        let plot_w = self.width - self.margin_left - self.margin_right;
        let plot_h = self.height - self.margin_top - self.margin_bottom;
        if plot_w <= 0.0 || plot_h <= 0.0 {
            return Err(Error::BadInput("margins leave no plot area".into()));
        }
        Ok(())
    }
}

/// The generator's fixed color ramp: `cells` distinct colors.
pub(crate) fn ramp_strip(cells: usize) -> Vec<String> {
    (0..cells)
        .map(|i| {
            let t = i as f64 / (cells - 1) as f64;
            RgbColor {
                r: (t * 255.0).round() as u8,
                g: 80,
                b: ((1.0 - t) * 255.0).round() as u8,
            }
            .to_hex()
        })
        .collect()
}

/// Format a FLOP anchor as a tick label (`1e19` style).
fn format_flop_label(value: f64) -> String {
    let exp = value.log10();
    if (exp - exp.round()).abs() < 1e-9 {
        format!("1e{}", exp.round() as i64)
    } else {
        format!("{value:e}")
    }
}

/// Format a parameter-count anchor as a tick label (`100M`, `1B` style).
fn format_param_label(value: f64) -> String {
    for (unit, suffix) in [(1e12, "T"), (1e9, "B"), (1e6, "M"), (1e3, "K")] {
        if value >= unit {
            let mantissa = value / unit;
            if (mantissa - mantissa.round()).abs() < 1e-9 {
                return format!("{:.0}{suffix}", mantissa.round());
            }
            if (mantissa * 10.0 - (mantissa * 10.0).round()).abs() < 1e-9 {
                return format!("{mantissa:.1}{suffix}");
            }
        }
    }
    format!("{value:e}")
}

/// Render a dataset as a synthetic scatter figure in the same SVG structure
/// the extractor expects: points group, axis-label groups, and a color-bar
/// strip. Losses are quantized to the nearest scale entry, exactly like a
/// real figure's limited palette would.
pub fn generate_synthetic_figure(dataset: &Dataset, layout: &FigureLayout) -> Result<String> {
    layout.validate()?;
    let out_of_range: Vec<&str> = dataset
        .observations
        .iter()
        .filter(|o| o.loss < layout.value_min || o.loss > layout.value_max)
        .map(|o| o.source_id.as_str())
        .collect();
    if !out_of_range.is_empty() {
        return Err(Error::BadInput(format!(
            "losses outside the color scale [{}, {}]: {}",
            layout.value_min,
            layout.value_max,
            out_of_range.join(", ")
        )));
    }

    let left = layout.margin_left;
    let right = layout.width - layout.margin_right;
    let top = layout.margin_top;
    let bottom = layout.height - layout.margin_bottom;

    let mut x_sorted = layout.x_anchors.clone();
    x_sorted.sort_by(|a, b| a.total_cmp(b));
    let mut y_sorted = layout.y_anchors.clone();
    y_sorted.sort_by(|a, b| a.total_cmp(b));
    let x_axis = AxisCalibration::fit(
        vec![(left, x_sorted[0]), (right, *x_sorted.last().unwrap())],
        AxisScale::Log10,
    )?;
    // Vertical axis: values grow upward, svg y grows downward.
    let y_axis = AxisCalibration::fit(
        vec![(top, *y_sorted.last().unwrap()), (bottom, y_sorted[0])],
        AxisScale::Log10,
    )?;
    let strip = ramp_strip(layout.scale_cells);
    let scale =
        ColorScale::from_strip(&strip, layout.value_min, layout.value_max, layout.top_is_max)?;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = layout.width,
        h = layout.height
    );
    let _ = writeln!(svg, r##"  <rect x="0" y="0" width="{}" height="{}" fill="#ffffff"/>"##,
        layout.width, layout.height);
    let _ = writeln!(
        svg,
        r##"  <line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="#333333"/>"##
    );
    let _ = writeln!(
        svg,
        r##"  <line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="#333333"/>"##
    );

    let _ = writeln!(svg, r#"  <g id="x-axis-labels" font-size="12" text-anchor="middle">"#);
    for anchor in &x_sorted {
        let _ = writeln!(
            svg,
            r#"    <text x="{:.4}" y="{:.4}">{}</text>"#,
            x_axis.svg_at(*anchor),
            bottom + 28.0,
            format_flop_label(*anchor)
        );
    }
    let _ = writeln!(svg, "  </g>");

    let _ = writeln!(svg, r#"  <g id="y-axis-labels" font-size="12" text-anchor="end">"#);
    for anchor in &y_sorted {
        let _ = writeln!(
            svg,
            r#"    <text x="{:.4}" y="{:.4}">{}</text>"#,
            left - 10.0,
            y_axis.svg_at(*anchor),
            format_param_label(*anchor)
        );
    }
    let _ = writeln!(svg, "  </g>");

    let bar_x = right + 50.0;
    let cell_h = (bottom - top) / layout.scale_cells as f64;
    let _ = writeln!(svg, r#"  <g id="color-scale">"#);
    for (k, hex) in strip.iter().enumerate() {
        let _ = writeln!(
            svg,
            r##"    <rect x="{bar_x:.4}" y="{:.4}" width="18" height="{:.4}" fill="#{hex}"/>"##,
            top + k as f64 * cell_h,
            cell_h
        );
    }
    let _ = writeln!(svg, "  </g>");

    let _ = writeln!(svg, r#"  <g id="scatter-points">"#);
    for obs in &dataset.observations {
        let entry = scale.entry_for_value(obs.loss)?;
        let _ = writeln!(
            svg,
            r##"    <circle id="{}" cx="{:.4}" cy="{:.4}" r="{}" fill="#{}"/>"##,
            obs.source_id,
            x_axis.svg_at(obs.flop),
            y_axis.svg_at(obs.n_params),
            layout.point_radius,
            entry.hex
        );
    }
    let _ = writeln!(svg, "  </g>");
    let _ = writeln!(svg, "</svg>");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn synthetic_dataset(n: usize) -> Dataset {
        let mut observations = Vec::new();
        for i in 0..n {
            let f = i as f64 / (n - 1) as f64;
            let n_params = 10f64.powf(8.0 + 2.6 * f);
            let flop = 10f64.powf(18.2 + 2.4 * f + 0.3 * ((i % 7) as f64) / 6.0);
            let tokens = flop / (6.0 * n_params);
            let loss = 2.05 + 2.8 * (0.15 + 0.85 * (1.0 - f) * (0.4 + 0.6 * ((i % 5) as f64) / 4.0));
            observations.push(RunObservation {
                source_id: format!("run{i:03}"),
                n_params,
                flop,
                tokens,
                loss,
            });
        }
        Dataset::new(observations, "synthetic figure fixture").unwrap()
    }

    #[test]
    fn round_trip_recovers_losses_within_quantization() {
        let dataset = synthetic_dataset(50);
        let layout = FigureLayout::for_dataset(&dataset).unwrap();
        let svg = generate_synthetic_figure(&dataset, &layout).unwrap();
        let config = ExtractConfig::for_layout(&layout);
        let extraction = extract_figure(&svg, &config).unwrap();
        assert_eq!(extraction.dataset.len(), 50);
        let step = (layout.value_max / layout.value_min).ln() / (layout.scale_cells - 1) as f64;
        for (original, decoded) in
            dataset.observations.iter().zip(&extraction.dataset.observations)
        {
            assert_eq!(original.source_id, decoded.source_id);
            assert!(
                (original.loss.ln() - decoded.loss.ln()).abs() <= 1.5 * step,
                "loss {} decoded as {}",
                original.loss,
                decoded.loss
            );
            assert_relative_eq!(original.n_params, decoded.n_params, max_relative = 1e-3);
            assert_relative_eq!(original.flop, decoded.flop, max_relative = 1e-3);
            assert_relative_eq!(
                decoded.tokens,
                decoded.flop / (6.0 * decoded.n_params),
                max_relative = 1e-12
            );
        }
        // Points carry per-point diagnostics; synthetic fills are exact.
        assert_eq!(extraction.report.n_points, 50);
        assert_eq!(extraction.report.max_color_distance, 0.0);
    }

    #[test]
    fn exact_scale_color_decodes_to_exact_entry_value() {
        let strip = ramp_strip(256);
        let scale = ColorScale::from_strip(&strip, 2.0, 5.0, true).unwrap();
        // Feed a dataset whose losses already sit on scale entries.
        let mut dataset = synthetic_dataset(8);
        for (k, obs) in dataset.observations.iter_mut().enumerate() {
            obs.loss = scale.entries[20 + 25 * k].value;
        }
        let layout = FigureLayout::for_dataset(&dataset).unwrap();
        let svg = generate_synthetic_figure(&dataset, &layout).unwrap();
        let extraction = extract_figure(&svg, &ExtractConfig::for_layout(&layout)).unwrap();
        for (original, decoded) in
            dataset.observations.iter().zip(&extraction.dataset.observations)
        {
            assert_eq!(original.loss, decoded.loss);
        }
    }

    #[test]
    fn decode_is_independent_of_point_order() {
        let dataset = synthetic_dataset(24);
        let mut reversed_obs = dataset.observations.clone();
        reversed_obs.reverse();
        let reversed = Dataset::new(reversed_obs, "reversed").unwrap();
        let layout = FigureLayout::for_dataset(&dataset).unwrap();
        let config = ExtractConfig::for_layout(&layout);
        let a = extract_figure(&generate_synthetic_figure(&dataset, &layout).unwrap(), &config)
            .unwrap();
        let b = extract_figure(&generate_synthetic_figure(&reversed, &layout).unwrap(), &config)
            .unwrap();
        let mut obs_a = a.dataset.observations.clone();
        let mut obs_b = b.dataset.observations.clone();
        obs_a.sort_by(|x, y| x.source_id.cmp(&y.source_id));
        obs_b.sort_by(|x, y| x.source_id.cmp(&y.source_id));
        assert_eq!(obs_a, obs_b);
    }

    #[test]
    fn orientation_flag_flips_decoded_losses() {
        let dataset = synthetic_dataset(12);
        let layout = FigureLayout::for_dataset(&dataset).unwrap();
        let svg = generate_synthetic_figure(&dataset, &layout).unwrap();
        let mut flipped = ExtractConfig::for_layout(&layout);
        flipped.scale_top_is_max = Some(!layout.top_is_max);
        let wrong = extract_figure(&svg, &flipped).unwrap();
        let right = extract_figure(&svg, &ExtractConfig::for_layout(&layout)).unwrap();
        // Reading the bar upside down reflects each loss in log space.
        let reflect = |l: f64| (2.0f64.ln() + 5.0f64.ln() - l.ln()).exp();
        for (good, bad) in right.dataset.observations.iter().zip(&wrong.dataset.observations) {
            assert_relative_eq!(reflect(good.loss), bad.loss, max_relative = 1e-6);
        }
    }

    #[test]
    fn orientation_must_be_explicit() {
        let dataset = synthetic_dataset(5);
        let layout = FigureLayout::for_dataset(&dataset).unwrap();
        let svg = generate_synthetic_figure(&dataset, &layout).unwrap();
        let mut config = ExtractConfig::for_layout(&layout);
        config.scale_top_is_max = None;
        let err = extract_figure(&svg, &config).unwrap_err();
        assert!(err.to_string().contains("never guessed"));
    }

    #[test]
    fn out_of_range_loss_rejected_by_generator() {
        let mut dataset = synthetic_dataset(5);
        dataset.observations[2].loss = 5.4;
        let layout = FigureLayout::for_dataset(&dataset).unwrap();
        let err = generate_synthetic_figure(&dataset, &layout).unwrap_err();
        assert!(err.to_string().contains("run002"));
    }

    #[test]
    fn config_loading_from_toml_and_json() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("extract.toml");
        std::fs::write(&toml_path, "scale_top_is_max = true\noutlier_threshold = 0.5\n").unwrap();
        let config = ExtractConfig::from_path(&toml_path).unwrap();
        assert_eq!(config.scale_top_is_max, Some(true));
        assert_eq!(config.outlier_threshold, 0.5);
        assert_eq!(config.points_selector, "scatter-points");

        let json_path = dir.path().join("extract.json");
        std::fs::write(
            &json_path,
            r#"{"scale_top_is_max": false, "y_label_offsets": {"1B": -2.5}}"#,
        )
        .unwrap();
        let config = ExtractConfig::from_path(&json_path).unwrap();
        assert_eq!(config.scale_top_is_max, Some(false));
        assert_eq!(config.y_label_offsets.get("1B"), Some(&-2.5));

        // Orientation missing: rejected at load time.
        let bare = dir.path().join("bare.toml");
        std::fs::write(&bare, "outlier_threshold = 0.4\n").unwrap();
        assert!(ExtractConfig::from_path(&bare).is_err());

        let odd = dir.path().join("extract.yaml");
        std::fs::write(&odd, "x: 1").unwrap();
        assert!(ExtractConfig::from_path(&odd).is_err());

        let unknown = dir.path().join("unknown.toml");
        std::fs::write(&unknown, "scale_top_is_max = true\nnot_a_field = 1\n").unwrap();
        assert!(ExtractConfig::from_path(&unknown).is_err());
    }

    #[test]
    fn outlier_partition_matches_threshold_semantics() {
        let ratios = [20.0, 10.0, 5.0, 2.0, 1.0, 0.5, 0.39, 0.3, 0.2, 0.1];
        let observations: Vec<RunObservation> = ratios
            .iter()
            .enumerate()
            .map(|(i, &ratio)| {
                let n_params = 1e9;
                let tokens = ratio * n_params;
                RunObservation {
                    source_id: format!("r{i}"),
                    n_params,
                    flop: 6.0 * n_params * tokens,
                    tokens,
                    loss: 3.0,
                }
            })
            .collect();
        let dataset = Dataset::new(observations, "ratio ladder").unwrap();
        let (kept, dropped) = dataset.partition_outliers(0.4);
        assert_eq!(dropped.len(), 4);
        assert_eq!(kept.len() + dropped.len(), dataset.len());
        let (kept, dropped) = dataset.partition_outliers(0.0);
        assert_eq!((kept.len(), dropped.len()), (10, 0));
        let (kept, dropped) = dataset.partition_outliers(f64::INFINITY);
        assert_eq!((kept.len(), dropped.len()), (0, 10));
    }

    #[test]
    fn label_formatting_round_trips() {
        use crate::extract::axis::parse_axis_label;
        let cases = [
            (format_flop_label(1e18), 1e18),
            (format_flop_label(1e23), 1e23),
            (format_param_label(1e8), 1e8),
            (format_param_label(1e9), 1e9),
            (format_param_label(2.5e9), 2.5e9),
            (format_param_label(75e6), 7.5e7),
        ];
        assert_eq!(cases[0].0, "1e18");
        assert_eq!(cases[2].0, "100M");
        assert_eq!(cases[3].0, "1B");
        assert_eq!(cases[4].0, "2.5B");
        for (text, value) in cases {
            assert_relative_eq!(parse_axis_label(&text).unwrap(), value, max_relative = 1e-9);
        }
    }

    #[test]
    fn layout_for_dataset_spans_data() {
        let dataset = synthetic_dataset(30);
        let layout = FigureLayout::for_dataset(&dataset).unwrap();
        assert!(layout.x_anchors.len() >= 2 && layout.y_anchors.len() >= 2);
        let flop_min = dataset.observations.iter().map(|o| o.flop).fold(f64::INFINITY, f64::min);
        let flop_max =
            dataset.observations.iter().map(|o| o.flop).fold(f64::NEG_INFINITY, f64::max);
        assert!(layout.x_anchors[0] <= flop_min);
        assert!(*layout.x_anchors.last().unwrap() >= flop_max);
    }
}
