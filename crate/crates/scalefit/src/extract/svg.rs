//! Low-level SVG harvesting: group selection, point-shape centers, fill
//! resolution, axis-label text, and color-bar strips.

use roxmltree::{Document, Node};

use crate::error::{Error, Result};

/// A harvested scatter point. Decoded fields stay unset until calibration
/// and color lookup run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedPoint {
    pub svg_x: f64,
    pub svg_y: f64,
    /// Lowercase 6-digit hex without the leading `#`.
    pub fill_hex: String,
    /// The shape's `id` attribute when present.
    pub shape_id: Option<String>,
    pub n_params: Option<f64>,
    pub flop: Option<f64>,
    pub loss: Option<f64>,
    /// RGB distance between `fill_hex` and the matched scale entry.
    pub color_distance: Option<f64>,
}

/// Which coordinate of a text label anchors it to the axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelAxis {
    /// Horizontal axis: the label's `x` position marks the value.
    X,
    /// Vertical axis: the label's `y` position marks the value.
    Y,
}

fn parse_document(svg_text: &str) -> Result<Document<'_>> {
    Document::parse(svg_text).map_err(|e| Error::BadInput(format!("malformed SVG: {e}")))
}

/// Locate exactly one `<g>` whose id matches `selector` (leading `#`
/// optional).
fn find_group<'a, 'input>(
    doc: &'a Document<'input>,
    selector: &str,
) -> Result<Node<'a, 'input>> {
    let id = selector.strip_prefix('#').unwrap_or(selector);
    if id.is_empty() {
        return Err(Error::BadInput("empty group selector".into()));
    }
    let mut matches = doc
        .descendants()
        .filter(|n| n.is_element() && n.tag_name().name() == "g" && n.attribute("id") == Some(id));
    let first = matches
        .next()
        .ok_or_else(|| Error::BadInput(format!("no group matches selector '{selector}'")))?;
    if matches.next().is_some() {
        return Err(Error::BadInput(format!("selector '{selector}' matches multiple groups")));
    }
    Ok(first)
}

fn attr_f64(node: &Node, name: &str, default: Option<f64>) -> Result<f64> {
    match node.attribute(name) {
        Some(raw) => raw.trim().parse::<f64>().map_err(|_| {
            Error::BadInput(format!(
                "attribute {name}='{raw}' on <{}> is not a number",
                node.tag_name().name()
            ))
        }),
        None => default.ok_or_else(|| {
            Error::BadInput(format!(
                "missing required attribute {name} on <{}>",
                node.tag_name().name()
            ))
        }),
    }
}

/// Normalize a CSS color to lowercase 6-digit hex (no `#`). Accepts
/// `#rgb` and `#rrggbb`.
pub fn normalize_hex(raw: &str) -> Result<String> {
    let body = raw
        .trim()
        .strip_prefix('#')
        .ok_or_else(|| Error::BadInput(format!("unsupported fill color '{raw}'")))?;
    let expanded: String = match body.len() {
        3 => body.chars().flat_map(|c| [c, c]).collect(),
        6 => body.to_string(),
        _ => return Err(Error::BadInput(format!("unsupported fill color '{raw}'"))),
    };
    if !expanded.chars().all(|c| c.is_ascii_hexdigit()) {
        return Err(Error::BadInput(format!("unsupported fill color '{raw}'")));
    }
    Ok(expanded.to_ascii_lowercase())
}

/// Pull a `fill` from the node or its ancestors: the `fill` attribute wins,
/// then a `fill:` declaration inside `style`.
fn raw_fill(node: &Node) -> Option<String> {
    for candidate in node.ancestors() {
        if !candidate.is_element() {
            continue;
        }
        if let Some(fill) = candidate.attribute("fill") {
            return Some(fill.trim().to_string());
        }
        if let Some(style) = candidate.attribute("style") {
            for declaration in style.split(';') {
                if let Some((key, value)) = declaration.split_once(':') {
                    if key.trim() == "fill" {
                        return Some(value.trim().to_string());
                    }
                }
            }
        }
    }
    None
}

fn shape_center(node: &Node) -> Result<(f64, f64)> {
    match node.tag_name().name() {
        "circle" | "ellipse" => {
            Ok((attr_f64(node, "cx", Some(0.0))?, attr_f64(node, "cy", Some(0.0))?))
        }
        "rect" => {
            let x = attr_f64(node, "x", Some(0.0))?;
            let y = attr_f64(node, "y", Some(0.0))?;
            let w = attr_f64(node, "width", None)?;
            let h = attr_f64(node, "height", None)?;
            Ok((x + w / 2.0, y + h / 2.0))
        }
        other => Err(Error::BadInput(format!("unsupported point shape <{other}>"))),
    }
}

fn is_shape(node: &Node) -> bool {
    node.is_element() && matches!(node.tag_name().name(), "circle" | "ellipse" | "rect")
}

/// Harvest every point shape under the selected group: center coordinates
/// plus resolved fill. An empty group yields an empty list.
pub fn parse_svg_points(svg_text: &str, group_selector: &str) -> Result<Vec<ExtractedPoint>> {
    let doc = parse_document(svg_text)?;
    let group = find_group(&doc, group_selector)?;
    let mut points = Vec::new();
    for (index, node) in group.descendants().filter(is_shape).enumerate() {
        let (svg_x, svg_y) = shape_center(&node)?;
        let raw = raw_fill(&node).ok_or_else(|| {
            Error::BadInput(format!(
                "point {index} (<{}>) has no resolvable fill",
                node.tag_name().name()
            ))
        })?;
        let fill_hex = normalize_hex(&raw).map_err(|_| {
            Error::BadInput(format!(
                "point {index} (<{}>) has unsupported fill '{raw}'",
                node.tag_name().name()
            ))
        })?;
        points.push(ExtractedPoint {
            svg_x,
            svg_y,
            fill_hex,
            shape_id: node.attribute("id").map(str::to_string),
            n_params: None,
            flop: None,
            loss: None,
            color_distance: None,
        });
    }
    Ok(points)
}

/// Harvest `(label_text, coordinate)` pairs from the text elements of an
/// axis-label group. `axis` picks which coordinate anchors the label.
pub fn harvest_axis_labels(
    svg_text: &str,
    group_selector: &str,
    axis: LabelAxis,
) -> Result<Vec<(String, f64)>> {
    let doc = parse_document(svg_text)?;
    let group = find_group(&doc, group_selector)?;
    let attr = match axis {
        LabelAxis::X => "x",
        LabelAxis::Y => "y",
    };
    let mut labels = Vec::new();
    for node in group.descendants() {
        if !(node.is_element() && node.tag_name().name() == "text") {
            continue;
        }
        let coordinate = attr_f64(&node, attr, None)?;
        let text: String = node
            .descendants()
            .filter_map(|n| if n.is_text() { n.text() } else { None })
            .collect();
        let text = text.trim().to_string();
        if text.is_empty() {
            return Err(Error::BadInput(format!(
                "empty axis label at {attr}={coordinate} in group '{group_selector}'"
            )));
        }
        labels.push((text, coordinate));
    }
    Ok(labels)
}

/// Harvest a vertical color-bar strip: the fills of the group's `rect`
/// children ordered top to bottom (ascending y).
pub fn harvest_scale_strip(svg_text: &str, group_selector: &str) -> Result<Vec<String>> {
    let doc = parse_document(svg_text)?;
    let group = find_group(&doc, group_selector)?;
    let mut cells: Vec<(f64, String)> = Vec::new();
    for (index, node) in group
        .descendants()
        .filter(|n| n.is_element() && n.tag_name().name() == "rect")
        .enumerate()
    {
        let y = attr_f64(&node, "y", Some(0.0))?;
        let raw = raw_fill(&node)
            .ok_or_else(|| Error::BadInput(format!("scale cell {index} has no resolvable fill")))?;
        cells.push((y, normalize_hex(&raw)?));
    }
    if cells.is_empty() {
        return Err(Error::BadInput(format!(
            "color-scale group '{group_selector}' contains no rect cells"
        )));
    }
    cells.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(cells.into_iter().map(|(_, hex)| hex).collect())
}
