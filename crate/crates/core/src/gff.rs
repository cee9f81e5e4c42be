//! Sobel edges and the geometric fidelity factor.
//!
//! GFF is the number of thresholded edge entries in a semantic (PCA) image
//! divided by the number in the matching RGB image, counted over every pixel
//! and channel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Largest Sobel magnitude a unit-range channel can produce.
pub const SOBEL_NORMALIZATION: f64 = 4.0 * std::f64::consts::SQRT_2;

/// Thresholds reported by default.
pub const DEFAULT_THRESHOLDS: [f64; 2] = [0.1, 0.3];

/// `0.05, 0.10, ..., 0.50`.
pub fn sweep_thresholds() -> Vec<f64> {
    (1..=10).map(|i| i as f64 * 0.05).collect()
}

/// Horizontal and vertical Sobel responses with replicate padding.
pub fn sobel_gradients(img: &Image) -> (Image, Image) {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let mut gx = Image::zeros(w, h, c);
    let mut gy = Image::zeros(w, h, c);
    for y in 0..h as isize {
        for x in 0..w as isize {
            for k in 0..c {
                let p = |dx: isize, dy: isize| img.get_clamped(x + dx, y + dy, k);
                let sx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
                let sy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
                gx.set(x as usize, y as usize, k, sx);
                gy.set(x as usize, y as usize, k, sy);
            }
        }
    }
    (gx, gy)
}

/// Per-channel gradient magnitude `√(Gx² + Gy²) / (4√2)`.
pub fn sobel_magnitude(img: &Image) -> Image {
    let (gx, gy) = sobel_gradients(img);
    let data = gx
        .data()
        .iter()
        .zip(gy.data())
        .map(|(a, b)| (a * a + b * b).sqrt() / SOBEL_NORMALIZATION)
        .collect();
    Image::from_vec(img.width(), img.height(), img.channels(), data).expect("shape preserved")
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMask {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub threshold: f64,
    pub mask: Vec<bool>,
}

impl EdgeMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> bool {
        self.mask[(y * self.width + x) * self.channels + c]
    }
}

/// Marks entries whose gradient magnitude is strictly above `threshold`.
pub fn edge_mask(grad: &Image, threshold: f64) -> Result<EdgeMask> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!("threshold {threshold} outside [0, 1]")));
    }
    Ok(EdgeMask {
        width: grad.width(),
        height: grad.height(),
        channels: grad.channels(),
        threshold,
        mask: grad.data().iter().map(|&g| g > threshold).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GffValue {
    pub threshold: f64,
    pub edges_sem: usize,
    pub edges_rgb: usize,
    /// `edges_sem / edges_rgb`, NaN when `degenerate`.
    pub gff: f64,
    /// The RGB image has no edges at this threshold.
    pub degenerate: bool,
}

struct EdgeInputs {
    sem: Image,
    rgb: Image,
}

fn prepare(sem: &Image, rgb: &Image) -> Result<EdgeInputs> {
    if sem.width() != rgb.width() || sem.height() != rgb.height() {
        return Err(Error::dims(
            format!("{}x{}", rgb.width(), rgb.height()),
            format!("{}x{}", sem.width(), sem.height()),
        ));
    }
    Ok(EdgeInputs {
        sem: sobel_magnitude(&sem.normalize_per_channel()),
        rgb: sobel_magnitude(&rgb.normalize_per_channel()),
    })
}

fn value(inputs: &EdgeInputs, threshold: f64) -> Result<GffValue> {
    let edges_sem = edge_mask(&inputs.sem, threshold)?.count();
    let edges_rgb = edge_mask(&inputs.rgb, threshold)?.count();
    let degenerate = edges_rgb == 0;
    Ok(GffValue {
        threshold,
        edges_sem,
        edges_rgb,
        gff: if degenerate { f64::NAN } else { edges_sem as f64 / edges_rgb as f64 },
        degenerate,
    })
}

/// GFF of a semantic image against an RGB image at one threshold.
///
/// Both inputs are min-max normalized per channel before edge extraction.
pub fn gff(sem: &Image, rgb: &Image, threshold: f64) -> Result<GffValue> {
    value(&prepare(sem, rgb)?, threshold)
}

/// GFF at each of `thresholds` (ascending); gradients are computed once.
pub fn gff_curve(sem: &Image, rgb: &Image, thresholds: &[f64]) -> Result<Vec<GffValue>> {
    if thresholds.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::invalid("thresholds must be sorted ascending"));
    }
    let inputs = prepare(sem, rgb)?;
    thresholds.iter().map(|&t| value(&inputs, t)).collect()
}
