//! Deterministic backbone oracles and PCA projection of feature images.
//!
//! The oracles stand in for pretrained feature extractors. `VisualOnly`
//! produces object-level features with soft boundaries; `VisualGeometry`
//! adds depth-derived structure channels and keeps edges sharp.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, LabelImage};
use crate::rng;
use crate::scene::RGBDImage;

pub const DEFAULT_FEATURE_DIM: usize = 128;
pub const DEFAULT_LANGUAGE_DIM: usize = 32;
pub const DEFAULT_EMBEDDING_DIM: usize = 64;
pub const DEFAULT_ORACLE_SEED: u64 = 7;

const FEATURE_MAGIC: &[u8; 4] = b"FEAT";
const FEATURE_VERSION: u32 = 1;
const DTYPE_F32: u32 = 0;

const COLOR_AMPLITUDE: f64 = 0.15;
const GEOMETRY_AMPLITUDE: f64 = 0.6;
const BLUR_RADIUS: usize = 2;
const VISUAL_BLUR_SIGMA: f64 = 2.0;
const GEOMETRY_BLUR_SIGMA: f64 = 0.5;

impl BackboneKind {
    fn blur_sigma(self) -> f64 {
        match self {
            BackboneKind::VisualOnly => VISUAL_BLUR_SIGMA,
            BackboneKind::VisualGeometry => GEOMETRY_BLUR_SIGMA,
        }
    }
}

/// An `H x W x d` feature map, row-major and pixel-interleaved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureImage(Image);

impl FeatureImage {
    pub fn new(image: Image) -> Result<Self> {
        if image.channels() < 3 {
            return Err(Error::dims("feature dim >= 3", image.channels()));
        }
        if image.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature image has non-finite entries"));
        }
        Ok(Self(image))
    }

    pub fn zeros(width: usize, height: usize, dim: usize) -> Self {
        Self(Image::zeros(width, height, dim))
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn dim(&self) -> usize {
        self.0.channels()
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        self.0.pixel(x, y)
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        self.0.pixel_mut(x, y)
    }

    pub fn as_image(&self) -> &Image {
        &self.0
    }

    pub fn into_image(self) -> Image {
        self.0
    }

    pub fn scale(&self, s: f64) -> Self {
        Self(self.0.scale(s))
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(FEATURE_MAGIC)?;
        for v in [FEATURE_VERSION, self.height() as u32, self.width() as u32, self.dim() as u32, DTYPE_F32] {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.0.data().len() * 4);
        for v in self.0.data() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != FEATURE_MAGIC {
            return Err(Error::Format("not a feature image (bad magic)".into()));
        }
        let mut header = [0u32; 5];
        for h in &mut header {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *h = u32::from_le_bytes(b);
        }
        let [version, height, width, dim, dtype] = header;
        if version != FEATURE_VERSION {
            return Err(Error::Format(format!("feature image version {version} is not supported")));
        }
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("feature image dtype {dtype} is not supported")));
        }
        let n = height as usize * width as usize * dim as usize;
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Self::new(Image::from_vec(width as usize, height as usize, dim as usize, data)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    VisualOnly,
    VisualGeometry,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 2] = [BackboneKind::VisualOnly, BackboneKind::VisualGeometry];

    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::VisualOnly => "visual",
            BackboneKind::VisualGeometry => "geom",
        }
    }
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visual" | "visual-only" => Ok(BackboneKind::VisualOnly),
            "geom" | "visual-geometry" => Ok(BackboneKind::VisualGeometry),
            _ => Err(Error::invalid(format!("unknown backbone `{s}` (expected visual or geom)"))),
        }
    }
}

impl std::fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, seed: u64) -> Vec<f64> {
    let mut r = rng::seeded(seed);
    (0..rows * cols).map(|_| scale * r.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_vector(dim: usize, seed: u64) -> Vec<f64> {
    let mut v = gaussian_matrix(dim, 1, 1.0, seed);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Unit prototype vector for a semantic class; background maps to zero.
pub fn class_prototype(label: u16, dim: usize, seed: u64) -> Vec<f64> {
    if label == LabelImage::BACKGROUND {
        return vec![0.0; dim];
    }
    unit_vector(dim, rng::derive_seed(seed, rng::tag("prototype") ^ label as u64))
}

/// Unit prototype in the language space used by the `f_l` head and queries.
pub fn language_prototype(label: u16, dim: usize, seed: u64) -> Vec<f64> {
    if label == LabelImage::BACKGROUND {
        return vec![0.0; dim];
    }
    unit_vector(dim, rng::derive_seed(seed, rng::tag("language") ^ label as u64))
}

/// Feature image as produced by the given backbone oracle.
///
/// Each pixel is its class prototype plus a small projection of its colour.
/// `VisualGeometry` adds a projection of [`geometry_channels`]. The result is
/// blurred with σ = 2 for `VisualOnly` and σ = 0.5 for `VisualGeometry`.
pub fn extract_features(
    img: &RGBDImage,
    labels: &LabelImage,
    kind: BackboneKind,
    dim: usize,
    seed: u64,
) -> Result<FeatureImage> {
    let (w, h) = (img.width(), img.height());
    if labels.width() != w || labels.height() != h {
        return Err(Error::dims(format!("{w}x{h} labels"), format!("{}x{}", labels.width(), labels.height())));
    }
    if dim < 3 {
        return Err(Error::invalid("feature dim must be at least 3"));
    }
    let color_proj = gaussian_matrix(dim, 3, COLOR_AMPLITUDE / (dim as f64).sqrt(), rng::derive_seed(seed, rng::tag("color")));
    let mut classes: Vec<u16> = labels.labels().to_vec();
    classes.sort_unstable();
    classes.dedup();
    let protos: Vec<(u16, Vec<f64>)> = classes.iter().map(|&c| (c, class_prototype(c, dim, seed))).collect();

    let mut out = Image::zeros(w, h, dim);
    for y in 0..h {
        for x in 0..w {
            let label = labels.get(x, y);
            let proto = &protos[protos.binary_search_by_key(&label, |p| p.0).unwrap()].1;
            let rgb = img.rgb.pixel(x, y);
            let px = out.pixel_mut(x, y);
            for (k, v) in px.iter_mut().enumerate() {
                let c = &color_proj[k * 3..k * 3 + 3];
                *v = proto[k] + c[0] * (rgb[0] - 0.5) + c[1] * (rgb[1] - 0.5) + c[2] * (rgb[2] - 0.5);
            }
        }
    }
    if kind == BackboneKind::VisualGeometry {
        let geo = geometry_channels(img);
        let proj = gaussian_matrix(dim, 3, GEOMETRY_AMPLITUDE / (dim as f64).sqrt(), rng::derive_seed(seed, rng::tag("geometry")));
        let mut structure = Image::zeros(w, h, dim);
        for y in 0..h {
            for x in 0..w {
                let g = geo.pixel(x, y).to_vec();
                for (k, v) in structure.pixel_mut(x, y).iter_mut().enumerate() {
                    let p = &proj[k * 3..k * 3 + 3];
                    *v = p[0] * g[0] + p[1] * g[1] + p[2] * g[2];
                }
            }
        }
        out.data_mut().iter_mut().zip(structure.data()).for_each(|(a, b)| *a += b);
    }
    FeatureImage::new(out.gaussian_blur(BLUR_RADIUS, kind.blur_sigma()))
}

/// Language-space ground truth: the class prototype of each pixel's label.
pub fn language_features(labels: &LabelImage, dim: usize, seed: u64) -> Result<FeatureImage> {
    if dim < 3 {
        return Err(Error::invalid("language dim must be at least 3"));
    }
    let mut out = Image::zeros(labels.width(), labels.height(), dim);
    let mut cache: Vec<(u16, Vec<f64>)> = Vec::new();
    for y in 0..labels.height() {
        for x in 0..labels.width() {
            let l = labels.get(x, y);
            let i = match cache.iter().position(|c| c.0 == l) {
                Some(i) => i,
                None => {
                    cache.push((l, language_prototype(l, dim, seed)));
                    cache.len() - 1
                }
            };
            out.pixel_mut(x, y).copy_from_slice(&cache[i].1);
        }
    }
    FeatureImage::new(out)
}

/// `[squash(|∇z|), n_x, n_y]` from finite differences of depth.
///
/// The normal proxy is `(-∂z/∂u, -∂z/∂v, 1)` normalized; flat depth gives zeros.
/// Differences only use foreground neighbours (central when both exist,
/// one-sided otherwise), so silhouettes against empty pixels do not read as
/// depth jumps; background pixels are all zero.
pub fn geometry_channels(img: &RGBDImage) -> Image {
    let (w, h) = (img.width(), img.height());
    let z = |x: isize, y: isize| -> Option<f64> {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            return None;
        }
        let d = img.depth_at(x as usize, y as usize);
        (d > 0.0).then_some(d)
    };
    let diff = |x: isize, y: isize, sx: isize, sy: isize, c: f64| -> f64 {
        match (z(x - sx, y - sy), z(x + sx, y + sy)) {
            (Some(a), Some(b)) => 0.5 * (b - a),
            (Some(a), None) => c - a,
            (None, Some(b)) => b - c,
            (None, None) => 0.0,
        }
    };
    let mut out = Image::zeros(w, h, 3);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let Some(c) = z(x, y) else { continue };
            let (dx, dy) = (diff(x, y, 1, 0, c), diff(x, y, 0, 1, c));
            let n = (dx * dx + dy * dy + 1.0).sqrt();
            let g = (dx * dx + dy * dy).sqrt();
            let px = out.pixel_mut(x as usize, y as usize);
            px[0] = g / (1.0 + g);
            px[1] = -dx / n;
            px[2] = -dy / n;
        }
    }
    out
}

/// Fixed linear summary of a feature image, used as input to the inverse model.
///
/// The pooled vector is `[mean_k, mean ∂u_k, mean ∂v_k]` over channels `k`
/// (forward differences), projected to `out_dim` by a matrix seeded per backbone.
pub fn global_embedding(f: &FeatureImage, kind: BackboneKind, out_dim: usize) -> Vec<f64> {
    let d = f.dim();
    let (w, h) = (f.width(), f.height());
    let mut pooled = vec![0.0; 3 * d];
    for y in 0..h {
        for x in 0..w {
            let p = f.pixel(x, y);
            for k in 0..d {
                pooled[k] += p[k];
            }
            if x + 1 < w {
                let q = f.pixel(x + 1, y);
                for k in 0..d {
                    pooled[d + k] += q[k] - p[k];
                }
            }
            if y + 1 < h {
                let q = f.pixel(x, y + 1);
                for k in 0..d {
                    pooled[2 * d + k] += q[k] - p[k];
                }
            }
        }
    }
    let n = (w * h) as f64;
    let nu = ((w.saturating_sub(1)) * h).max(1) as f64;
    let nv = (w * (h.saturating_sub(1))).max(1) as f64;
    for k in 0..d {
        pooled[k] /= n;
        pooled[d + k] *= w as f64 / nu;
        pooled[2 * d + k] *= h as f64 / nv;
    }
    let seed = rng::derive_seed(rng::tag("embedding"), rng::tag(kind.name()) ^ d as u64);
    let proj = gaussian_matrix(out_dim, 3 * d, 1.0 / ((3 * d) as f64).sqrt(), seed);
    (0..out_dim)
        .map(|i| proj[i * 3 * d..(i + 1) * 3 * d].iter().zip(&pooled).map(|(a, b)| a * b).sum())
        .collect()
}

/// Rank-`k` principal component projection of a feature image.
#[derive(Clone, Debug)]
pub struct PcaProjection {
    /// `H x W x k` scores, unnormalized.
    pub scores: Image,
    /// `d x k` orthonormal basis, column `j` is the `j`-th principal direction.
    pub basis: DMatrix<f64>,
    /// Leading `k` singular values of the centered data matrix.
    pub singular_values: Vec<f64>,
    /// Per-channel mean removed before projection.
    pub mean: Vec<f64>,
}

impl PcaProjection {
    /// Scores min-max normalized per channel into `[0, 1]`.
    pub fn visualization(&self) -> Image {
        self.scores.normalize_per_channel()
    }

    /// Reconstruction `mean + scores · basisᵀ` as an `H x W x d` image.
    pub fn reconstruct(&self) -> Image {
        let (w, h, k) = (self.scores.width(), self.scores.height(), self.scores.channels());
        let d = self.basis.nrows();
        let mut out = Image::zeros(w, h, d);
        for y in 0..h {
            for x in 0..w {
                let s = self.scores.pixel(x, y).to_vec();
                for (c, v) in out.pixel_mut(x, y).iter_mut().enumerate() {
                    *v = self.mean[c] + (0..k).map(|j| s[j] * self.basis[(c, j)]).sum::<f64>();
                }
            }
        }
        out
    }
}

/// Projects features onto their top `k` principal directions.
///
/// Directions come from the eigendecomposition of the `d x d` Gram matrix of
/// the centered data; each column is signed so its largest-magnitude entry is positive.
pub fn pca_project(f: &FeatureImage, k: usize) -> Result<PcaProjection> {
    let d = f.dim();
    let n = f.width() * f.height();
    if k == 0 || k > d {
        return Err(Error::invalid(format!("pca rank {k} must be in 1..={d}")));
    }
    if n < k {
        return Err(Error::invalid(format!("pca needs at least {k} pixels, got {n}")));
    }
    let data = f.as_image().data();
    let mut mean = vec![0.0; d];
    for px in data.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(px) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let x = DMatrix::from_fn(n, d, |i, j| data[i * d + j] - mean[j]);
    let gram = x.transpose() * &x;
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut basis = DMatrix::zeros(d, k);
    let mut singular_values = Vec::with_capacity(k);
    for (j, &i) in order.iter().take(k).enumerate() {
        let mut col = eig.eigenvectors.column(i).into_owned();
        let pivot = col.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if pivot < 0.0 {
            col.neg_mut();
        }
        basis.set_column(j, &col);
        singular_values.push(eig.eigenvalues[i].max(0.0).sqrt());
    }
    let s = &x * &basis;
    let scores = Image::from_fn(f.width(), f.height(), k, |px, py, c| s[(py * f.width() + px, c)]);
    Ok(PcaProjection {
        scores,
        basis,
        singular_values,
        mean,
    })
}
