//! Logarithmic color scales: build one from a color-bar strip, then decode
//! point fills by nearest-neighbor lookup in RGB space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A color bar is limited to 256 distinct hex values.
pub const MAX_SCALE_ENTRIES: usize = 256;

pub const DEFAULT_VALUE_MIN: f64 = 2.0;
pub const DEFAULT_VALUE_MAX: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RgbColor {
    pub r: u8,
    pub g: u8,
    pub b: u8,
}

impl RgbColor {
    /// Parse a 6-digit hex string (no `#`).
    pub fn from_hex(hex: &str) -> Result<Self> {
        if hex.len() != 6 || !hex.chars().all(|c| c.is_ascii_hexdigit()) {
            return Err(Error::BadInput(format!("not a 6-digit hex color: '{hex}'")));
        }
        let channel = |range: std::ops::Range<usize>| u8::from_str_radix(&hex[range], 16).unwrap();
        Ok(Self { r: channel(0..2), g: channel(2..4), b: channel(4..6) })
    }

    pub fn to_hex(&self) -> String {
        format!("{:02x}{:02x}{:02x}", self.r, self.g, self.b)
    }

    /// Euclidean distance in RGB space.
    pub fn distance(&self, other: &RgbColor) -> f64 {
        let dr = self.r as f64 - other.r as f64;
        let dg = self.g as f64 - other.g as f64;
        let db = self.b as f64 - other.b as f64;
        (dr * dr + dg * dg + db * db).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleEntry {
    /// Lowercase 6-digit hex.
    pub hex: String,
    pub value: f64,
}

/// A decoded color scale: distinct strip colors with log-interpolated
/// values, ordered top to bottom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorScale {
    pub entries: Vec<ScaleEntry>,
    pub value_min: f64,
    pub value_max: f64,
    /// Orientation of the source strip: does the top carry `value_max`?
    pub top_is_max: bool,
    /// Colors that appeared at more than one strip position (first kept).
    pub duplicate_colors: Vec<String>,
}

impl ColorScale {
    /// Build a scale from a top-to-bottom strip of colors. Values are
    /// assigned by logarithmic interpolation over the strip position;
    /// `top_is_max` fixes which end carries `value_max` and is never
    /// guessed.
    pub fn from_strip(
        strip: &[String],
        value_min: f64,
        value_max: f64,
        top_is_max: bool,
    ) -> Result<Self> {
        if !(value_min.is_finite() && value_max.is_finite() && value_min > 0.0) {
            return Err(Error::BadInput(format!(
                "scale bounds must be positive and finite, got [{value_min}, {value_max}]"
            )));
        }
        if value_min >= value_max {
            return Err(Error::BadInput(format!(
                "scale needs value_min < value_max, got [{value_min}, {value_max}]"
            )));
        }
        if strip.len() < 2 {
            return Err(Error::BadInput(format!(
                "color strip needs at least 2 cells, got {}",
                strip.len()
            )));
        }
        let (ln_min, ln_max) = (value_min.ln(), value_max.ln());
        let mut entries: Vec<ScaleEntry> = Vec::new();
        let mut duplicate_colors = Vec::new();
        for (i, hex) in strip.iter().enumerate() {
            RgbColor::from_hex(hex)?;
            if let Some(existing) = entries.iter().find(|e| &e.hex == hex) {
                if !duplicate_colors.contains(&existing.hex) {
                    duplicate_colors.push(existing.hex.clone());
                }
                continue;
            }
            let t = i as f64 / (strip.len() - 1) as f64;
            let ln_value = if top_is_max {
                ln_max + t * (ln_min - ln_max)
            } else {
                ln_min + t * (ln_max - ln_min)
            };
            entries.push(ScaleEntry { hex: hex.clone(), value: ln_value.exp() });
        }
        if entries.len() < 2 {
            return Err(Error::BadInput("color strip has a single distinct color".into()));
        }
        if entries.len() > MAX_SCALE_ENTRIES {
            return Err(Error::BadInput(format!(
                "color strip has {} distinct colors, limit is {MAX_SCALE_ENTRIES}",
                entries.len()
            )));
        }
        Ok(Self { entries, value_min, value_max, top_is_max, duplicate_colors })
    }

    /// Nearest entry to a fill color by RGB distance (first entry wins
    /// ties). Returns `(value, distance, entry_index)`.
    pub fn lookup(&self, hex: &str) -> Result<(f64, f64, usize)> {
        let probe = RgbColor::from_hex(hex)?;
        let mut best: Option<(f64, f64, usize)> = None;
        for (i, entry) in self.entries.iter().enumerate() {
            let d = probe.distance(&RgbColor::from_hex(&entry.hex)?);
            if best.map(|(_, bd, _)| d < bd).unwrap_or(true) {
                best = Some((entry.value, d, i));
            }
        }
        best.ok_or_else(|| Error::BadInput("empty color scale".into()))
    }

    /// The entry whose value is nearest to `value` in log space; used when
    /// rendering a figure, so render + extract hit the same entry.
    pub fn entry_for_value(&self, value: f64) -> Result<&ScaleEntry> {
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::BadInput(format!("scale value must be positive, got {value}")));
        }
        let ln_v = value.ln();
        self.entries
            .iter()
            .min_by(|a, b| {
                (a.value.ln() - ln_v).abs().total_cmp(&(b.value.ln() - ln_v).abs())
            })
            .ok_or_else(|| Error::BadInput("empty color scale".into()))
    }

    /// One quantization step in log-value terms.
    pub fn log_step(&self) -> f64 {
        (self.value_max / self.value_min).ln() / (self.entries.len() - 1) as f64
    }
}
