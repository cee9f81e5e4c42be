//! Relevancy-based semantic localization and image quality metrics.

use serde::{Deserialize, Serialize};

use crate::distill::{semantic_image_from_depth, SemanticField};
use crate::error::{Error, Result};
use crate::features::{language_prototype, FeatureImage};
use crate::geometry::{CameraIntrinsics, PoseSE3};
use crate::image::{gaussian_kernel, Image};
use crate::rng;
use crate::scene::{render, RenderConfig, Scene};
use crate::viridis::VIRIDIS;

/// Generic negative phrases that anchor the relevancy comparison.
pub const CANONICAL_PHRASES: [&str; 3] = ["object", "stuff", "things"];

pub const PSNR_CAP: f64 = 100.0;
const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 0.0 && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Deterministic unit embedding of a phrase.
pub fn phrase_embedding(phrase: &str, dim: usize) -> Vec<f64> {
    use rand::Rng as _;
    let mut r = rng::seeded(rng::derive_seed(rng::tag("phrase"), rng::tag(phrase)));
    let v: Vec<f64> = (0..dim).map(|_| r.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    normalized(&v).expect("nonzero gaussian sample")
}

pub fn canonical_embeddings(dim: usize) -> Vec<Vec<f64>> {
    CANONICAL_PHRASES.iter().map(|p| phrase_embedding(p, dim)).collect()
}

/// A query embedding with its canonical negatives, all unit length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuerySet {
    query: Vec<f64>,
    canonical: Vec<Vec<f64>>,
}

impl QuerySet {
    pub fn new(query: &[f64], canonical: &[Vec<f64>]) -> Result<Self> {
        if canonical.is_empty() {
            return Err(Error::invalid("query set needs at least one canonical embedding"));
        }
        let q = normalized(query).ok_or_else(|| Error::invalid("query embedding must be nonzero"))?;
        let canonical = canonical
            .iter()
            .map(|c| {
                if c.len() != q.len() {
                    return Err(Error::dims(q.len(), c.len()));
                }
                normalized(c).ok_or_else(|| Error::invalid("canonical embedding must be nonzero"))
            })
            .collect::<Result<_>>()?;
        Ok(Self { query: q, canonical })
    }

    /// Query for a semantic class: its language prototype against the canonical phrases.
    pub fn for_class(label: u16, dim: usize, oracle_seed: u64) -> Result<Self> {
        Self::new(&language_prototype(label, dim, oracle_seed), &canonical_embeddings(dim))
    }

    pub fn query(&self) -> &[f64] {
        &self.query
    }

    pub fn canonical(&self) -> &[Vec<f64>] {
        &self.canonical
    }

    pub fn dim(&self) -> usize {
        self.query.len()
    }
}

/// `1 / (1 + exp(x))` without overflow.
fn logistic_neg(x: f64) -> f64 {
    if x > 0.0 {
        let e = (-x).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + x.exp())
    }
}

/// `minᵢ exp(q·f) / (exp(f·cᵢ) + exp(q·f))` over the canonical embeddings.
///
/// Inputs are normalized first; a zero `feature` scores 0.
pub fn relevancy_score(query: &[f64], feature: &[f64], canonical: &[Vec<f64>]) -> Result<f64> {
    if canonical.is_empty() {
        return Err(Error::invalid("relevancy needs at least one canonical embedding"));
    }
    if feature.len() != query.len() {
        return Err(Error::dims(query.len(), feature.len()));
    }
    let Some(f) = normalized(feature) else {
        return Ok(0.0);
    };
    let q = normalized(query).ok_or_else(|| Error::invalid("query embedding must be nonzero"))?;
    let qf = dot(&q, &f);
    let mut best = f64::INFINITY;
    for c in canonical {
        if c.len() != q.len() {
            return Err(Error::dims(q.len(), c.len()));
        }
        let c = normalized(c).ok_or_else(|| Error::invalid("canonical embedding must be nonzero"))?;
        best = best.min(logistic_neg(dot(&f, &c) - qf));
    }
    Ok(best)
}

/// Relevancy per pixel, min-max normalized over foreground pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevancyMask {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    /// Raw score mapped to 0.
    pub min: f64,
    /// Raw score mapped to 1.
    pub max: f64,
    /// No foreground or constant scores; `values` are all zero.
    pub degenerate: bool,
}

impl RelevancyMask {
    /// Raw relevancy scores (background pixels stay 0).
    pub fn raw(&self, foreground: &[bool]) -> Vec<f64> {
        self.values
            .iter()
            .zip(foreground)
            .map(|(&v, &fg)| if fg { self.min + v * (self.max - self.min) } else { 0.0 })
            .collect()
    }

    pub fn to_image(&self) -> Image {
        Image::from_vec(self.width, self.height, 1, self.values.clone()).expect("shape")
    }
}

/// Relevancy mask of a rendered language-feature image.
pub fn relevancy_from_features(features: &FeatureImage, foreground: &[bool], queries: &QuerySet) -> Result<RelevancyMask> {
    let (w, h) = (features.width(), features.height());
    if foreground.len() != w * h {
        return Err(Error::dims(w * h, foreground.len()));
    }
    if features.dim() != queries.dim() {
        return Err(Error::dims(queries.dim(), features.dim()));
    }
    let d = features.dim();
    let raw: Vec<Option<f64>> = features
        .as_image()
        .data()
        .chunks_exact(d)
        .zip(foreground)
        .map(|(f, &fg)| {
            fg.then(|| relevancy_score(&queries.query, f, &queries.canonical))
                .transpose()
        })
        .collect::<Result<_>>()?;
    let (min, max) = raw
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(max > min) {
        return Ok(RelevancyMask {
            width: w,
            height: h,
            values: vec![0.0; w * h],
            min: if min.is_finite() { min } else { 0.0 },
            max: if max.is_finite() { max } else { 0.0 },
            degenerate: true,
        });
    }
    Ok(RelevancyMask {
        width: w,
        height: h,
        values: raw.iter().map(|v| v.map_or(0.0, |v| (v - min) / (max - min))).collect(),
        min,
        max,
        degenerate: false,
    })
}

/// Renders the language head at `pose` and scores every foreground pixel.
pub fn relevancy_mask(
    field: &SemanticField,
    scene: &Scene,
    k: &CameraIntrinsics,
    pose: &PoseSE3,
    queries: &QuerySet,
) -> Result<RelevancyMask> {
    let r = render(scene, k, pose, &RenderConfig::default())?;
    let (_, fl) = semantic_image_from_depth(field, k, pose, &r.rgbd.depth)?;
    let fg: Vec<bool> = r.rgbd.depth.iter().map(|d| *d > 0.0).collect();
    relevancy_from_features(&fl, &fg, queries)
}

/// Maps a single-channel image in `[0, 1]` to RGB through the viridis table.
pub fn colormap(img: &Image) -> Result<Image> {
    if img.channels() != 1 {
        return Err(Error::dims(1, img.channels()));
    }
    let mut out = Image::zeros(img.width(), img.height(), 3);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let idx = (img.get(x, y, 0).clamp(0.0, 1.0) * 255.0).round() as usize;
            let c = VIRIDIS[idx];
            for k in 0..3 {
                out.set(x, y, k, c[k] as f64 / 255.0);
            }
        }
    }
    Ok(out)
}

/// Valid-mode separable convolution with a symmetric kernel.
fn filter_valid(img: &[f64], w: usize, h: usize, kernel: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = kernel.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| kernel[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| kernel[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean SSIM over channels and every position where the 11x11 window fits.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    let win = 2 * SSIM_RADIUS + 1;
    if a.width() < win || a.height() < win {
        return Err(Error::invalid(format!("ssim needs images of at least {win}x{win}")));
    }
    let kernel = gaussian_kernel(SSIM_RADIUS, SSIM_SIGMA);
    let (w, h) = (a.width(), a.height());
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..a.channels() {
        let x = a.channel(c).into_vec();
        let y = b.channel(c).into_vec();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, ow, oh) = filter_valid(&x, w, h, &kernel);
        let my = filter_valid(&y, w, h, &kernel).0;
        let sxx = filter_valid(&xx, w, h, &kernel).0;
        let syy = filter_valid(&yy, w, h, &kernel).0;
        let sxy = filter_valid(&xy, w, h, &kernel).0;
        for i in 0..ow * oh {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            total += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// `10 log₁₀(1 / MSE)` for images in `[0, 1]`, capped at 100 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    let n = a.data().len();
    if n == 0 {
        return Err(Error::invalid("psnr of empty images"));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Colormapped SSIM and PSNR between a relevancy mask and a binary ground truth.
pub fn mask_metrics(relevancy: &Image, gt: &Image) -> Result<(f64, f64)> {
    let (a, b) = (colormap(relevancy)?, colormap(gt)?);
    Ok((ssim(&a, &b)?, psnr(&a, &b)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationRow {
    pub pose_id: usize,
    pub class: u16,
    pub ssim: f64,
    pub psnr: f64,
    pub degenerate: bool,
}

/// Localization metrics for every (pose, class) pair.
///
/// `queries[i]` is the query for `classes[i]`; ground truth is the rendered
/// label map of that class.
pub fn evaluate_localization(
    field: &SemanticField,
    scene: &Scene,
    k: &CameraIntrinsics,
    poses: &[PoseSE3],
    classes: &[u16],
    queries: &[QuerySet],
) -> Result<Vec<LocalizationRow>> {
    if poses.is_empty() {
        return Err(Error::invalid("localization needs at least one pose"));
    }
    if classes.len() != queries.len() {
        return Err(Error::dims(classes.len(), queries.len()));
    }
    let mut rows = Vec::with_capacity(poses.len() * classes.len());
    for (pose_id, pose) in poses.iter().enumerate() {
        let r = render(scene, k, pose, &RenderConfig::default())?;
        let (_, fl) = semantic_image_from_depth(field, k, pose, &r.rgbd.depth)?;
        let fg: Vec<bool> = r.rgbd.depth.iter().map(|d| *d > 0.0).collect();
        for (&class, q) in classes.iter().zip(queries) {
            let mask = relevancy_from_features(&fl, &fg, q)?;
            let (ssim, psnr) = mask_metrics(&mask.to_image(), &r.labels.mask(class))?;
            rows.push(LocalizationRow {
                pose_id,
                class,
                ssim,
                psnr,
                degenerate: mask.degenerate,
            });
        }
    }
    Ok(rows)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let v = values.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}
