//! Axis calibration: parse tick labels, fit the affine map from SVG
//! coordinates to (log) data values, and verify the anchors actually sit on
//! a line.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of the axis span that calibration residuals may not exceed.
pub const MAX_RESIDUAL_FRACTION: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AxisScale {
    Log10,
    Linear,
}

/// Parse a tick label: plain numbers, scientific notation, and K/M/B/T
/// suffixes.
pub fn parse_axis_label(label: &str) -> Result<f64> {
    let trimmed = label.trim();
    if trimmed.is_empty() {
        return Err(Error::BadInput("empty axis label".into()));
    }
    let (body, multiplier) = match trimmed.chars().last().unwrap().to_ascii_uppercase() {
        'K' => (&trimmed[..trimmed.len() - 1], 1e3),
        'M' => (&trimmed[..trimmed.len() - 1], 1e6),
        'B' => (&trimmed[..trimmed.len() - 1], 1e9),
        'T' => (&trimmed[..trimmed.len() - 1], 1e12),
        _ => (trimmed, 1.0),
    };
    let base: f64 = body
        .trim()
        .parse()
        .map_err(|_| Error::BadInput(format!("cannot parse axis label '{label}'")))?;
    let value = base * multiplier;
    if !value.is_finite() {
        return Err(Error::BadInput(format!("axis label '{label}' is not finite")));
    }
    Ok(value)
}

/// Affine map from SVG coordinate to data value (through log10 for log
/// axes), least-squares fitted to labeled anchors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisCalibration {
    /// `(svg_coordinate, data_value)` pairs, sorted by coordinate.
    pub anchors: Vec<(f64, f64)>,
    pub scale: AxisScale,
    slope: f64,
    intercept: f64,
    /// Largest absolute anchor residual in the transformed domain.
    pub max_residual: f64,
    /// Anchor span in the transformed domain.
    pub span: f64,
}

impl AxisCalibration {
    pub fn fit(mut anchors: Vec<(f64, f64)>, scale: AxisScale) -> Result<Self> {
        if anchors.len() < 2 {
            return Err(Error::BadInput(format!(
                "axis calibration needs at least 2 anchors, got {}",
                anchors.len()
            )));
        }
        for (coord, value) in &anchors {
            if !coord.is_finite() || !value.is_finite() {
                return Err(Error::BadInput(format!(
                    "non-finite anchor ({coord}, {value})"
                )));
            }
            if scale == AxisScale::Log10 && *value <= 0.0 {
                return Err(Error::BadInput(format!(
                    "log axis anchor value must be positive, got {value}"
                )));
            }
        }
        anchors.sort_by(|a, b| a.0.total_cmp(&b.0));
        for pair in anchors.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(Error::BadInput(format!(
                    "two anchors share svg coordinate {}",
                    pair[0].0
                )));
            }
        }
        let transformed: Vec<f64> = anchors
            .iter()
            .map(|(_, v)| match scale {
                AxisScale::Log10 => v.log10(),
                AxisScale::Linear => *v,
            })
            .collect();
        let increasing = transformed.windows(2).all(|w| w[1] > w[0]);
        let decreasing = transformed.windows(2).all(|w| w[1] < w[0]);
        if !(increasing || decreasing) {
            return Err(Error::BadInput(
                "anchor values are not strictly monotone along the axis".into(),
            ));
        }

        let n = anchors.len() as f64;
        let mean_x = anchors.iter().map(|(c, _)| c).sum::<f64>() / n;
        let mean_t = transformed.iter().sum::<f64>() / n;
        let mut covariance = 0.0;
        let mut variance = 0.0;
        for ((coord, _), t) in anchors.iter().zip(&transformed) {
            covariance += (coord - mean_x) * (t - mean_t);
            variance += (coord - mean_x) * (coord - mean_x);
        }
        let slope = covariance / variance;
        let intercept = mean_t - slope * mean_x;

        let mut max_residual: f64 = 0.0;
        for ((coord, _), t) in anchors.iter().zip(&transformed) {
            max_residual = max_residual.max((t - (slope * coord + intercept)).abs());
        }
        let span = transformed.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - transformed.iter().cloned().fold(f64::INFINITY, f64::min);
        if max_residual > MAX_RESIDUAL_FRACTION * span {
            return Err(Error::BadInput(format!(
                "axis anchors deviate from affine placement: residual {max_residual:.4} \
                 exceeds {MAX_RESIDUAL_FRACTION} of span {span:.4}"
            )));
        }
        Ok(Self { anchors, scale, slope, intercept, max_residual, span })
    }

    /// Build a calibration from harvested `(label, coordinate)` pairs,
    /// shifting any label listed in `offsets` by its override first.
    pub fn from_labels(
        labels: &[(String, f64)],
        scale: AxisScale,
        offsets: &BTreeMap<String, f64>,
    ) -> Result<Self> {
        let anchors = labels
            .iter()
            .map(|(text, coord)| {
                let value = parse_axis_label(text)?;
                let offset = offsets.get(text).copied().unwrap_or(0.0);
                Ok((coord + offset, value))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::fit(anchors, scale)
    }

    /// Data value at an SVG coordinate.
    pub fn value_at(&self, svg_coordinate: f64) -> f64 {
        let t = self.slope * svg_coordinate + self.intercept;
        match self.scale {
            AxisScale::Log10 => 10f64.powf(t),
            AxisScale::Linear => t,
        }
    }

    /// Inverse map: the SVG coordinate at which a data value sits.
    pub fn svg_at(&self, value: f64) -> f64 {
        let t = match self.scale {
            AxisScale::Log10 => value.log10(),
            AxisScale::Linear => value,
        };
        (t - self.intercept) / self.slope
    }
}
