//! Query-to-render feature matching producing 2D-3D correspondences.

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{pca_project, FeatureImage};
use crate::geometry::{backproject, CameraIntrinsics, PoseSE3, Vec2, Vec3};
use crate::gff::sobel_gradients;
use crate::image::Image;
use crate::rng;
use crate::scene::RGBDImage;

/// Minimal number of correspondences for a pose hypothesis.
pub const MIN_SAMPLE: usize = 6;

/// A query pixel `p` paired with the world point `q` it should observe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    /// Inhomogeneous pixel coordinates `(u, v)` in the query image.
    pub pixel: Vec2,
    pub point: Vec3,
    /// Match confidence in `[0, 1]`.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    pub max_keypoints: usize,
    /// Half-width of the square search window in the rendered image.
    pub search_radius: usize,
    /// Half-width of the descriptor patch (3 gives 7x7).
    pub patch_radius: usize,
    /// Accept when `(1 - best) / (1 - second) < ratio`.
    pub ratio: f64,
    /// Channels kept after projecting features onto the query's principal directions.
    pub reduced_dim: usize,
    /// Candidates within this Chebyshev distance of the best one do not count as second best.
    pub exclusion_radius: usize,
    /// Matches whose 3x3 rendered-depth neighbourhood varies by more than this
    /// fraction of the center depth are dropped, since depth there is a blend of surfaces.
    pub max_depth_jump: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            max_keypoints: 200,
            search_radius: 40,
            patch_radius: 3,
            ratio: 0.8,
            reduced_dim: 8,
            exclusion_radius: 2,
            max_depth_jump: 0.1,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_keypoints == 0 || self.reduced_dim == 0 || self.patch_radius == 0 {
            return Err(Error::invalid("match config counts must be positive"));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::invalid(format!("ratio must be in (0, 1], got {}", self.ratio)));
        }
        Ok(())
    }
}

/// Projects both images onto the query's leading principal directions.
fn reduce(query: &FeatureImage, rendered: &FeatureImage, k: usize) -> Result<(Image, Image)> {
    let pca = pca_project(query, k.min(query.dim()))?;
    let k = pca.basis.ncols();
    let project = |f: &FeatureImage| {
        Image::from_fn(f.width(), f.height(), k, |x, y, j| {
            f.pixel(x, y)
                .iter()
                .enumerate()
                .map(|(c, v)| (v - pca.mean[c]) * pca.basis[(c, j)])
                .sum()
        })
    };
    Ok((pca.scores, project(rendered)))
}

/// Local maxima of summed squared Sobel response, strongest first, ties by raster index.
pub fn detect_keypoints(features: &Image, max_keypoints: usize, border: usize) -> Vec<(usize, usize)> {
    let (w, h) = (features.width(), features.height());
    let (gx, gy) = sobel_gradients(features);
    let energy: Vec<f64> = gx
        .data()
        .chunks_exact(features.channels())
        .zip(gy.data().chunks_exact(features.channels()))
        .map(|(a, b)| a.iter().chain(b).map(|v| v * v).sum())
        .collect();
    let mut peaks = Vec::new();
    for y in border..h.saturating_sub(border) {
        for x in border..w.saturating_sub(border) {
            let e = energy[y * w + x];
            if !(e > 1e-12) {
                continue;
            }
            let mut is_max = true;
            'nb: for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let n = energy[ny as usize * w + nx as usize];
                    // earlier neighbours win ties
                    let earlier = (dy, dx) < (0, 0);
                    if n > e || (earlier && n == e) {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                peaks.push((e, y * w + x));
            }
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    peaks.truncate(max_keypoints);
    peaks.into_iter().map(|(_, i)| (i % w, i / w)).collect()
}

/// Zero-mean, unit-norm patch around `(x, y)`; `None` if the patch is flat.
fn descriptor(img: &Image, x: usize, y: usize, r: usize) -> Option<Vec<f64>> {
    let c = img.channels();
    let mut d = Vec::with_capacity((2 * r + 1).pow(2) * c);
    for py in y - r..=y + r {
        for px in x - r..=x + r {
            d.extend_from_slice(img.pixel(px, py));
        }
    }
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    d.iter_mut().for_each(|v| *v -= mean);
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 1e-12) {
        return None;
    }
    d.iter_mut().for_each(|v| *v /= norm);
    Some(d)
}

/// Bilinear sample of channel `c` with replicate padding.
fn sample(img: &Image, x: f64, y: f64, c: usize) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (xi, yi) = (x0 as isize, y0 as isize);
    let g = |dx: isize, dy: isize| img.get_clamped(xi + dx, yi + dy, c);
    (1.0 - fy) * ((1.0 - fx) * g(0, 0) + fx * g(1, 0)) + fy * ((1.0 - fx) * g(0, 1) + fx * g(1, 1))
}

/// Sub-pixel offset of the rendered patch at `to` that best reproduces the query
/// patch at `from`, by Gauss-Newton on the squared feature difference.
///
/// The offset stays within one pixel and is exactly zero when the patches already agree.
fn subpixel_shift(query: &Image, rendered: &Image, from: (usize, usize), to: (usize, usize), r: usize) -> Vec2 {
    const H: f64 = 1e-3;
    let channels = query.channels();
    let mut delta = Vec2::zeros();
    for _ in 0..5 {
        let (mut a, mut b) = (nalgebra::Matrix2::<f64>::zeros(), Vec2::zeros());
        for j in -(r as isize)..=r as isize {
            for i in -(r as isize)..=r as isize {
                let (qx, qy) = ((from.0 as isize + i) as usize, (from.1 as isize + j) as usize);
                let x = to.0 as f64 + i as f64 + delta.x;
                let y = to.1 as f64 + j as f64 + delta.y;
                for c in 0..channels {
                    let res = sample(rendered, x, y, c) - query.get(qx, qy, c);
                    let gx = (sample(rendered, x + H, y, c) - sample(rendered, x - H, y, c)) / (2.0 * H);
                    let gy = (sample(rendered, x, y + H, c) - sample(rendered, x, y - H, c)) / (2.0 * H);
                    let g = Vec2::new(gx, gy);
                    a += g * g.transpose();
                    b += g * res;
                }
            }
        }
        let Some(step) = a.try_inverse().map(|inv| -(inv * b)) else {
            break;
        };
        if !step.iter().all(|v| v.is_finite()) {
            break;
        }
        delta = (delta + step).map(|v| v.clamp(-1.0, 1.0));
        if step.norm() < 1e-6 {
            break;
        }
    }
    delta
}

/// Bilinear depth at a subpixel location; `None` if any of the four taps is background.
fn interpolate_depth(img: &RGBDImage, p: &Vec2) -> Option<f64> {
    let (x0, y0) = (p.x.floor(), p.y.floor());
    if x0 < 0.0 || y0 < 0.0 {
        return None;
    }
    let (xi, yi) = (x0 as usize, y0 as usize);
    if xi + 1 >= img.width() || yi + 1 >= img.height() {
        return if p.x == x0 && p.y == y0 { Some(img.depth_at(xi, yi)).filter(|d| *d > 0.0) } else { None };
    }
    let (fx, fy) = (p.x - x0, p.y - y0);
    let taps = [
        (img.depth_at(xi, yi), (1.0 - fx) * (1.0 - fy)),
        (img.depth_at(xi + 1, yi), fx * (1.0 - fy)),
        (img.depth_at(xi, yi + 1), (1.0 - fx) * fy),
        (img.depth_at(xi + 1, yi + 1), fx * fy),
    ];
    if taps.iter().any(|(d, wt)| *wt > 0.0 && !(*d > 0.0)) {
        return None;
    }
    Some(taps.iter().filter(|(_, wt)| *wt > 0.0).map(|(d, wt)| d * wt).sum())
}

/// True when every 3x3 neighbour is foreground with depth within `max_jump` of the center, relatively.
fn depth_is_smooth(img: &RGBDImage, x: usize, y: usize, max_jump: f64) -> bool {
    let c = img.depth_at(x, y);
    for ny in y.saturating_sub(1)..=(y + 1).min(img.height() - 1) {
        for nx in x.saturating_sub(1)..=(x + 1).min(img.width() - 1) {
            let d = img.depth_at(nx, ny);
            if !(d > 0.0) || (d - c).abs() > max_jump * c {
                return false;
            }
        }
    }
    true
}

/// Matches query keypoints into the rendered view and lifts them with rendered depth.
pub fn match_features(
    query_rgbd: &RGBDImage,
    query_features: &FeatureImage,
    rendered_rgbd: &RGBDImage,
    rendered_features: &FeatureImage,
    k: &CameraIntrinsics,
    rendered_pose: &PoseSE3,
    cfg: &MatchConfig,
) -> Result<Vec<Correspondence>> {
    cfg.validate()?;
    let (w, h) = (k.width, k.height);
    for (name, fw, fh) in [
        ("query rgbd", query_rgbd.width(), query_rgbd.height()),
        ("query features", query_features.width(), query_features.height()),
        ("rendered rgbd", rendered_rgbd.width(), rendered_rgbd.height()),
        ("rendered features", rendered_features.width(), rendered_features.height()),
    ] {
        if (fw, fh) != (w, h) {
            return Err(Error::dims(format!("{w}x{h}"), format!("{name} {fw}x{fh}")));
        }
    }
    if query_features.dim() != rendered_features.dim() {
        return Err(Error::dims(query_features.dim(), rendered_features.dim()));
    }
    let r = cfg.patch_radius;
    if w <= 2 * r + 2 || h <= 2 * r + 2 {
        return Err(Error::invalid("image too small for descriptor patches"));
    }
    let (qf, rf) = reduce(query_features, rendered_features, cfg.reduced_dim)?;
    let keypoints = detect_keypoints(&qf, cfg.max_keypoints, r + 1);

    let rendered: Vec<Option<Vec<f64>>> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % w, i / w);
            let inside = x >= r && y >= r && x + r < w && y + r < h;
            if inside && rendered_rgbd.depth_at(x, y) > 0.0 {
                descriptor(&rf, x, y, r)
            } else {
                None
            }
        })
        .collect();

    let matches: Vec<Option<Correspondence>> = keypoints
        .par_iter()
        .map(|&(kx, ky)| {
            let d = descriptor(&qf, kx, ky, r)?;
            let rad = cfg.search_radius;
            let (x0, x1) = (kx.saturating_sub(rad), (kx + rad).min(w - 1));
            let (y0, y1) = (ky.saturating_sub(rad), (ky + rad).min(h - 1));
            let mut scores = Vec::new();
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if let Some(c) = &rendered[y * w + x] {
                        scores.push((d.iter().zip(c).map(|(a, b)| a * b).sum::<f64>(), x, y));
                    }
                }
            }
            let &(best, bx, by) = scores.iter().fold(None, |acc: Option<&(f64, usize, usize)>, s| match acc {
                Some(a) if a.0 >= s.0 => Some(a),
                _ => Some(s),
            })?;
            let ex = cfg.exclusion_radius;
            let second = scores
                .iter()
                .filter(|s| s.1.abs_diff(bx) > ex || s.2.abs_diff(by) > ex)
                .map(|s| s.0)
                .fold(-1.0f64, f64::max);
            let denom = 1.0 - second;
            if !(denom > 0.0) || (1.0 - best) / denom >= cfg.ratio {
                return None;
            }
            if !depth_is_smooth(rendered_rgbd, bx, by, cfg.max_depth_jump) {
                return None;
            }
            let delta = subpixel_shift(&qf, &rf, (kx, ky), (bx, by), r);
            let target = Vec2::new(bx as f64 + delta.x, by as f64 + delta.y);
            let depth = interpolate_depth(rendered_rgbd, &target).unwrap_or(rendered_rgbd.depth_at(bx, by));
            let point = backproject(k, rendered_pose, &target, depth).ok()?;
            Some(Correspondence {
                pixel: Vec2::new(kx as f64, ky as f64),
                point,
                score: best.clamp(0.0, 1.0),
            })
        })
        .collect();
    let out: Vec<Correspondence> = matches.into_iter().flatten().collect();
    if out.len() < MIN_SAMPLE {
        return Err(Error::InsufficientMatches { found: out.len(), required: MIN_SAMPLE });
    }
    Ok(out)
}

/// Ground-truth correspondences at the query's keypoints, lifted with the true
/// pose and depth, with optional Gaussian pixel noise on `p`.
pub fn oracle_correspondences(
    query_rgbd: &RGBDImage,
    query_features: &FeatureImage,
    k: &CameraIntrinsics,
    true_pose: &PoseSE3,
    cfg: &MatchConfig,
    pixel_noise: f64,
    seed: u64,
) -> Result<Vec<Correspondence>> {
    cfg.validate()?;
    let noise = Normal::new(0.0, pixel_noise.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = rng::seeded(seed);
    let qf = pca_project(query_features, cfg.reduced_dim.min(query_features.dim()))?.scores;
    let mut out = Vec::new();
    for (x, y) in detect_keypoints(&qf, cfg.max_keypoints, cfg.patch_radius + 1) {
        let depth = query_rgbd.depth_at(x, y);
        if !(depth > 0.0) {
            continue;
        }
        let p = Vec2::new(x as f64, y as f64);
        let point = backproject(k, true_pose, &p, depth)?;
        let jitter = if pixel_noise > 0.0 {
            Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng))
        } else {
            Vec2::zeros()
        };
        out.push(Correspondence { pixel: p + jitter, point, score: 1.0 });
    }
    if out.len() < MIN_SAMPLE {
        return Err(Error::InsufficientMatches { found: out.len(), required: MIN_SAMPLE });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keypoints_are_local_maxima_in_order() {
        let img = Image::from_fn(20, 20, 1, |x, y, _| if x >= 10 && y >= 10 { 1.0 } else { 0.0 });
        let kps = detect_keypoints(&img, 50, 2);
        assert!(!kps.is_empty());
        assert_eq!(kps, detect_keypoints(&img, 50, 2));
        for &(x, y) in &kps {
            assert!((8..=11).contains(&x) || (8..=11).contains(&y));
        }
        assert!(detect_keypoints(&Image::zeros(20, 20, 1), 50, 2).is_empty());
    }

    #[test]
    fn descriptor_is_normalized() {
        let img = Image::from_fn(9, 9, 2, |x, y, c| (x * 3 + y * 7 + c) as f64 * 0.1);
        let d = descriptor(&img, 4, 4, 3).unwrap();
        assert!(d.iter().sum::<f64>().abs() < 1e-12);
        assert!((d.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(descriptor(&Image::filled(9, 9, 2, 0.3), 4, 4, 3).is_none());
    }
}
