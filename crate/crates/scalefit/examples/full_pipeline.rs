//! Run the complete analysis on the bundled reference figure.
//!
//! Extraction, both fits, the bootstrap, hypothesis tests, policy curves,
//! plots, and the markdown report all land in one run directory together
//! with a hash manifest. Arguments: an optional output directory (default
//! `scalefit-run`) and an optional bootstrap resample count (default 400;
//! pass 0 to skip the bootstrap, or 4000 for publication-grade standard
//! errors).

use scalefit::pipeline::{run_pipeline, PipelineConfig};

fn main() -> scalefit::Result<()> {
    let mut args = std::env::args().skip(1);
    let out_dir = args.next().unwrap_or_else(|| "scalefit-run".into());
    let resamples = match args.next() {
        Some(raw) => raw
            .parse()
            .map_err(|_| scalefit::Error::BadInput(format!("bad resample count: {raw}")))?,
        None => 400,
    };

    let config = PipelineConfig {
        out_dir: Some(out_dir.clone().into()),
        resamples,
        ..PipelineConfig::default()
    };
    let manifest = run_pipeline(&config)?;

    println!("run directory: {out_dir}");
    for step in &manifest.steps {
        println!("  step {:<12} -> {}", step.name, step.outputs.join(", "));
    }
    println!("  report       -> report.md");
    Ok(())
}
