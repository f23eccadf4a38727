//! SVG figure extraction: harvest scatter points, calibrate axes from tick
//! labels, decode the logarithmic color scale, and assemble a Dataset.

pub mod axis;
pub mod color;
pub mod figure;
pub mod svg;

pub use axis::{parse_axis_label, AxisCalibration, AxisScale};
pub use color::{ColorScale, RgbColor, ScaleEntry};
pub use figure::{
    decode_points, extract_figure, extract_figure_path, generate_synthetic_figure, ExtractConfig,
    Extraction, ExtractionReport, FigureLayout,
};
pub use svg::{harvest_axis_labels, harvest_scale_strip, parse_svg_points, ExtractedPoint,
    LabelAxis};
