//! Minimal standalone SVG scatter plots.

use std::fmt::Write as _;
use std::path::Path;

use vdt::io::atomic_write;
use vdt::{Result, VdtError};

pub const VIEWPORT: f64 = 800.0;
const MARGIN: f64 = 0.05;
const RADIUS: f64 = 2.0;

/// Fill colors of successive groups (repeats after the last entry).
pub const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

/// Scatter plot with one circle per point. Both axes share one scale fitted to
/// the joint bounding box, leaving a 5% margin on each side.
pub fn svg_document(groups: &[Vec<[f64; 2]>]) -> Result<String> {
    if groups.is_empty() {
        return Err(VdtError::Input("scatter plot needs at least one point group".into()));
    }
    let all = groups.iter().flatten();
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in all {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    if lo[0] > hi[0] {
        lo = [0.0; 2];
        hi = [0.0; 2];
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let scale = if span > 0.0 { VIEWPORT * (1.0 - 2.0 * MARGIN) / span } else { 1.0 };
    let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    let half = VIEWPORT / 2.0;

    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{v}\" height=\"{v}\" viewBox=\"0 0 {v} {v}\">\n\
         <rect width=\"{v}\" height=\"{v}\" fill=\"white\"/>\n",
        v = VIEWPORT
    );
    for (g, points) in groups.iter().enumerate() {
        let _ = writeln!(out, "<g fill=\"{}\">", PALETTE[g % PALETTE.len()]);
        for p in points {
            let cx = half + (p[0] - center[0]) * scale;
            let cy = half - (p[1] - center[1]) * scale;
            let _ = writeln!(out, "<circle cx=\"{cx:.3}\" cy=\"{cy:.3}\" r=\"{RADIUS}\"/>");
        }
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn render_svg(groups: &[Vec<[f64; 2]>], path: &Path) -> Result<()> {
    atomic_write(path, svg_document(groups)?.as_bytes())
}
