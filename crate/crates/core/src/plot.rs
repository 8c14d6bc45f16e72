//! Similarity-matrix heatmap rendering.
//!
//! Renders a [`SimilarityReport`] to a PNG with a diverging blue-white-red
//! palette over [-1, 1]. Plots are presentation artifacts: nothing reads
//! them back, and no numeric contract depends on the pixel values beyond
//! the palette mapping tested here.

use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::SimilarityReport;

/// Map a cosine value in [-1, 1] to a diverging blue (-1) through white (0)
/// to red (+1) color.
pub fn diverging_color(v: f64) -> [u8; 3] {
    let v = v.clamp(-1.0, 1.0);
    let ramp = |t: f64| (255.0 * t).round().clamp(0.0, 255.0) as u8;
    if v < 0.0 {
        // Blue end: interpolate white -> blue as v goes 0 -> -1.
        let t = 1.0 + v;
        [ramp(t), ramp(t), 255]
    } else {
        // Red end: interpolate white -> red as v goes 0 -> 1.
        let t = 1.0 - v;
        [255, ramp(t), ramp(t)]
    }
}

/// Pixels per matrix cell, chosen so the image is at least 256px wide.
fn cell_size(n: usize) -> usize {
    256usize.div_ceil(n).max(1)
}

/// Render the similarity matrix as a square heatmap PNG.
pub fn render_similarity_png(path: &Path, report: &SimilarityReport) -> Result<()> {
    let n = report.class_order.len();
    if n == 0 || report.matrix.len() != n || report.matrix.iter().any(|r| r.len() != n) {
        return Err(Error::data(format!(
            "similarity matrix is not square over {n} classes"
        )));
    }
    let cell = cell_size(n);
    let side = (n * cell) as u32;
    let mut img = image::RgbImage::new(side, side);
    for (y, x, px) in img.enumerate_pixels_mut().map(|(x, y, p)| (y, x, p)) {
        let r = y as usize / cell;
        let c = x as usize / cell;
        *px = image::Rgb(diverging_color(report.matrix[r][c]));
    }
    img.save(path).map_err(|e| Error::data(format!("writing {}: {e}", path.display())))
}
