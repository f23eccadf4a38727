//! Render the bundled reference figure.
//!
//! With no arguments the SVG goes to stdout. With a path it is written to
//! disk; pointing it at `crates/scalefit/assets/reference_figure.svg`
//! regenerates the embedded asset (the `bundled_figure_matches_regeneration`
//! test checks the two stay in sync).

use scalefit::reference::render_reference_figure;

fn main() -> scalefit::Result<()> {
    let svg = render_reference_figure()?;
    match std::env::args().nth(1) {
        Some(path) => {
            std::fs::write(&path, &svg).map_err(|e| scalefit::Error::io(&path, e))?;
            eprintln!("wrote {} bytes to {path}", svg.len());
        }
        None => print!("{svg}"),
    }
    Ok(())
}
