//! Report plots: residual scatters and the policy-band curve.
//!
//! Hand-rolled SVG in the same minimal style as the synthetic figure
//! generator. Output is a pure function of the inputs, with no timestamps
//! or environment-dependent content, so identical runs produce identical
//! bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::objective::ResidualReport;
use crate::policy::PolicyCurve;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 25.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 55.0;

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        MARGIN_LEFT + (v - self.x_min) / (self.x_max - self.x_min) * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT)
    }

    fn y(&self, v: f64) -> f64 {
        let bottom = HEIGHT - MARGIN_BOTTOM;
        bottom - (v - self.y_min) / (self.y_max - self.y_min) * (bottom - MARGIN_TOP)
    }
}

fn svg_open(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(out, r##"  <rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>"##);
    let _ = writeln!(
        out,
        r#"  <text x="{:.1}" y="22" font-size="14" text-anchor="middle" font-family="sans-serif">{}</text>"#,
        WIDTH / 2.0,
        xml_escape(title)
    );
}

fn svg_axes(out: &mut String) {
    let left = MARGIN_LEFT;
    let right = WIDTH - MARGIN_RIGHT;
    let top = MARGIN_TOP;
    let bottom = HEIGHT - MARGIN_BOTTOM;
    let _ = writeln!(out, r##"  <line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="#333333"/>"##);
    let _ = writeln!(out, r##"  <line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="#333333"/>"##);
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Decade tick positions covering [lo, hi] in log10 units.
fn decade_ticks(lo: f64, hi: f64) -> Vec<i32> {
    let a = lo.ceil() as i32;
    let b = hi.floor() as i32;
    let step = 1 + ((b - a).max(0) as usize) / 8;
    (a..=b).step_by(step).collect()
}

fn x_axis_label(out: &mut String, text: &str) {
    let _ = writeln!(
        out,
        r#"  <text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle" font-family="sans-serif">{}</text>"#,
        (MARGIN_LEFT + WIDTH - MARGIN_RIGHT) / 2.0,
        HEIGHT - 12.0,
        xml_escape(text)
    );
}

fn y_axis_label(out: &mut String, text: &str) {
    let cy = (MARGIN_TOP + HEIGHT - MARGIN_BOTTOM) / 2.0;
    let _ = writeln!(
        out,
        r#"  <text x="16" y="{cy:.1}" font-size="12" text-anchor="middle" font-family="sans-serif" transform="rotate(-90 16 {cy:.1})">{}</text>"#,
        xml_escape(text)
    );
}

/// Residuals (predicted minus observed log loss) against training compute.
///
/// Residual rows are joined to the dataset by `source_id`, so the report
/// works for a subset of the dataset (the post-screen fit) as well as the
/// full run list.
pub fn residual_scatter_svg(
    dataset: &Dataset,
    residuals: &ResidualReport,
    title: &str,
) -> Result<String> {
    if residuals.residuals.is_empty() {
        return Err(Error::BadInput("no residuals to plot".into()));
    }
    let flop_by_id: BTreeMap<&str, f64> = dataset
        .observations
        .iter()
        .map(|o| (o.source_id.as_str(), o.flop))
        .collect();
    let mut points = Vec::with_capacity(residuals.residuals.len());
    for (id, r) in residuals.source_ids.iter().zip(residuals.residuals.iter()) {
        let flop = flop_by_id.get(id.as_str()).ok_or_else(|| {
            Error::BadInput(format!("residual row {id} has no matching dataset run"))
        })?;
        points.push((flop.log10(), *r));
    }

    let x_min = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let x_max = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let r_extent = points
        .iter()
        .map(|p| p.1.abs())
        .fold(0.0f64, f64::max)
        .max(1e-6);
    let frame = Frame {
        x_min: x_min - 0.15,
        x_max: x_max + 0.15,
        y_min: -1.15 * r_extent,
        y_max: 1.15 * r_extent,
    };

    let mut svg = String::new();
    svg_open(&mut svg, title);
    svg_axes(&mut svg);

    // zero-residual guide
    let zero_y = frame.y(0.0);
    let _ = writeln!(
        svg,
        r##"  <line x1="{:.1}" y1="{zero_y:.4}" x2="{:.1}" y2="{zero_y:.4}" stroke="#999999" stroke-dasharray="4 3"/>"##,
        MARGIN_LEFT,
        WIDTH - MARGIN_RIGHT
    );

    let _ = writeln!(svg, r#"  <g id="x-ticks" font-size="11" text-anchor="middle" font-family="sans-serif">"#);
    for d in decade_ticks(frame.x_min, frame.x_max) {
        let x = frame.x(d as f64);
        let bottom = HEIGHT - MARGIN_BOTTOM;
        let _ = writeln!(svg, r##"    <line x1="{x:.4}" y1="{bottom}" x2="{x:.4}" y2="{:.1}" stroke="#333333"/>"##, bottom + 5.0);
        let _ = writeln!(svg, r#"    <text x="{x:.4}" y="{:.1}">1e{d}</text>"#, bottom + 19.0);
    }
    let _ = writeln!(svg, "  </g>");

    let _ = writeln!(svg, r#"  <g id="y-ticks" font-size="11" text-anchor="end" font-family="sans-serif">"#);
    for frac in [-1.0f64, -0.5, 0.0, 0.5, 1.0] {
        let v = frac * r_extent;
        let y = frame.y(v);
        let _ = writeln!(svg, r##"    <line x1="{:.1}" y1="{y:.4}" x2="{:.1}" y2="{y:.4}" stroke="#333333"/>"##, MARGIN_LEFT - 5.0, MARGIN_LEFT);
        let _ = writeln!(svg, r#"    <text x="{:.1}" y="{:.4}">{v:.3}</text>"#, MARGIN_LEFT - 8.0, y + 4.0);
    }
    let _ = writeln!(svg, "  </g>");

    let _ = writeln!(svg, r#"  <g id="residual-points">"#);
    for (x, r) in &points {
        let _ = writeln!(
            svg,
            r##"    <circle cx="{:.4}" cy="{:.4}" r="3" fill="#4477aa" fill-opacity="0.75"/>"##,
            frame.x(*x),
            frame.y(*r)
        );
    }
    let _ = writeln!(svg, "  </g>");

    x_axis_label(&mut svg, "training compute (FLOP)");
    y_axis_label(&mut svg, "residual in log loss (nats)");
    let _ = writeln!(svg, "</svg>");
    Ok(svg)
}

/// Tokens-per-parameter policy curve with its bootstrap band, on log-log
/// axes.
pub fn policy_band_svg(curve: &PolicyCurve, title: &str) -> Result<String> {
    if curve.points.is_empty() {
        return Err(Error::BadInput("no policy points to plot".into()));
    }
    let has_band = curve.points.iter().all(|p| p.ratio_lo.is_some() && p.ratio_hi.is_some());
    let mut y_lo = f64::INFINITY;
    let mut y_hi = f64::NEG_INFINITY;
    for p in &curve.points {
        y_lo = y_lo.min(p.ratio_lo.unwrap_or(p.ratio));
        y_hi = y_hi.max(p.ratio_hi.unwrap_or(p.ratio));
    }
    let frame = Frame {
        x_min: curve.points.first().unwrap().compute.log10() - 0.15,
        x_max: curve.points.last().unwrap().compute.log10() + 0.15,
        y_min: y_lo.log10() - 0.2,
        y_max: y_hi.log10() + 0.2,
    };

    let mut svg = String::new();
    svg_open(&mut svg, title);
    svg_axes(&mut svg);

    let _ = writeln!(svg, r#"  <g id="x-ticks" font-size="11" text-anchor="middle" font-family="sans-serif">"#);
    for d in decade_ticks(frame.x_min, frame.x_max) {
        let x = frame.x(d as f64);
        let bottom = HEIGHT - MARGIN_BOTTOM;
        let _ = writeln!(svg, r##"    <line x1="{x:.4}" y1="{bottom}" x2="{x:.4}" y2="{:.1}" stroke="#333333"/>"##, bottom + 5.0);
        let _ = writeln!(svg, r#"    <text x="{x:.4}" y="{:.1}">1e{d}</text>"#, bottom + 19.0);
    }
    let _ = writeln!(svg, "  </g>");

    let _ = writeln!(svg, r#"  <g id="y-ticks" font-size="11" text-anchor="end" font-family="sans-serif">"#);
    for v in [1.0f64, 3.0, 10.0, 30.0, 100.0, 300.0] {
        let ly = v.log10();
        if ly < frame.y_min || ly > frame.y_max {
            continue;
        }
        let y = frame.y(ly);
        let _ = writeln!(svg, r##"    <line x1="{:.1}" y1="{y:.4}" x2="{:.1}" y2="{y:.4}" stroke="#333333"/>"##, MARGIN_LEFT - 5.0, MARGIN_LEFT);
        let _ = writeln!(svg, r#"    <text x="{:.1}" y="{:.4}">{v:.0}</text>"#, MARGIN_LEFT - 8.0, y + 4.0);
    }
    let _ = writeln!(svg, "  </g>");

    if has_band {
        let mut path = String::new();
        for (i, p) in curve.points.iter().enumerate() {
            let cmd = if i == 0 { 'M' } else { 'L' };
            let _ = write!(
                path,
                "{cmd}{:.4} {:.4} ",
                frame.x(p.compute.log10()),
                frame.y(p.ratio_lo.unwrap().log10())
            );
        }
        for p in curve.points.iter().rev() {
            let _ = write!(
                path,
                "L{:.4} {:.4} ",
                frame.x(p.compute.log10()),
                frame.y(p.ratio_hi.unwrap().log10())
            );
        }
        path.push('Z');
        let _ = writeln!(svg, r##"  <path id="band" d="{path}" fill="#88aacc" fill-opacity="0.35"/>"##);
    }

    let mut line = String::new();
    for p in &curve.points {
        let _ = write!(line, "{:.4},{:.4} ", frame.x(p.compute.log10()), frame.y(p.ratio.log10()));
    }
    let _ = writeln!(
        svg,
        r##"  <polyline id="ratio-curve" points="{}" fill="none" stroke="#224466" stroke-width="2"/>"##,
        line.trim_end()
    );

    x_axis_label(&mut svg, "training compute (FLOP)");
    y_axis_label(&mut svg, "optimal tokens per parameter");
    let _ = writeln!(svg, "</svg>");
    Ok(svg)
}
