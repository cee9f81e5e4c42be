//! Semantic fields distilled from 2D backbone features.
//!
//! A dense multi-resolution grid is shared by two heads: `f_s` reproduces the
//! backbone's spatial features and `f_l` the language-space features. Training
//! back-projects foreground pixels of posed views to world points and fits the
//! field to the features observed there.

use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::features::{
    extract_features, language_features, BackboneKind, FeatureImage, DEFAULT_FEATURE_DIM, DEFAULT_LANGUAGE_DIM,
};
use crate::geometry::{backproject, CameraIntrinsics, PoseSE3, Vec2, Vec3};
use crate::image::Image;
use crate::nn::{Adam, AdamConfig, Mlp};
use crate::rng;
use crate::scene::{render, Aabb, RGBDImage, RenderConfig, Scene};

/// Guard added (squared) to norms inside the cosine similarity.
pub const CSIM_EPSILON: f64 = 1e-8;

const CHECKPOINT_KIND: &str = "semantic-field";
const CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    /// Grid resolution per level; level `l` has `N_l + 1` vertices per axis.
    pub resolutions: Vec<usize>,
    pub features_per_level: usize,
    pub hidden: usize,
    pub spatial_dim: usize,
    pub language_dim: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            resolutions: vec![8, 16, 32, 64],
            features_per_level: 4,
            hidden: 64,
            spatial_dim: DEFAULT_FEATURE_DIM,
            language_dim: DEFAULT_LANGUAGE_DIM,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolutions.is_empty() || self.resolutions.windows(2).any(|w| w[0] >= w[1]) || self.resolutions[0] == 0 {
            return Err(Error::invalid(format!(
                "grid resolutions must be positive and strictly increasing, got {:?}",
                self.resolutions
            )));
        }
        if self.features_per_level == 0 || self.hidden == 0 || self.spatial_dim == 0 || self.language_dim == 0 {
            return Err(Error::invalid("field dimensions must be positive"));
        }
        Ok(())
    }

    pub fn encoding_dim(&self) -> usize {
        self.resolutions.len() * self.features_per_level
    }
}

/// Dense trilinear feature grids at several resolutions over a box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiResGrid {
    resolutions: Vec<usize>,
    features: usize,
    bounds: Aabb,
    values: Vec<f64>,
}

/// The eight interpolation corners of one level: flat value offsets and weights.
#[derive(Clone, Copy, Debug, Default)]
pub struct LevelCorners {
    pub offsets: [usize; 8],
    pub weights: [f64; 8],
}

impl MultiResGrid {
    pub fn zeros(resolutions: &[usize], features: usize, bounds: Aabb) -> Self {
        let n = resolutions.iter().map(|r| (r + 1).pow(3) * features).sum();
        Self {
            resolutions: resolutions.to_vec(),
            features,
            bounds,
            values: vec![0.0; n],
        }
    }

    pub fn levels(&self) -> usize {
        self.resolutions.len()
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn level_offset(&self, level: usize) -> usize {
        self.resolutions[..level].iter().map(|r| (r + 1).pow(3) * self.features).sum()
    }

    /// Flat offset of the first feature at vertex `(i, j, k)` of `level`.
    pub fn vertex_offset(&self, level: usize, i: usize, j: usize, k: usize) -> usize {
        let n = self.resolutions[level] + 1;
        self.level_offset(level) + ((k * n + j) * n + i) * self.features
    }

    /// World position of vertex `(i, j, k)` of `level`.
    pub fn vertex_position(&self, level: usize, i: usize, j: usize, k: usize) -> Vec3 {
        let n = self.resolutions[level] as f64;
        let ext = self.bounds.max - self.bounds.min;
        self.bounds.min + Vec3::new(i as f64 / n * ext.x, j as f64 / n * ext.y, k as f64 / n * ext.z)
    }

    pub fn corners(&self, x: &Vec3) -> Vec<LevelCorners> {
        let ext = self.bounds.max - self.bounds.min;
        let u = Vec3::from_fn(|a, _| ((x[a] - self.bounds.min[a]) / ext[a]).clamp(0.0, 1.0));
        let mut base = 0;
        self.resolutions
            .iter()
            .map(|&res| {
                let n = res + 1;
                let mut idx = [0usize; 3];
                let mut frac = [0.0; 3];
                for a in 0..3 {
                    let s = u[a] * res as f64;
                    let i = (s.floor() as usize).min(res - 1);
                    idx[a] = i;
                    frac[a] = s - i as f64;
                }
                let mut c = LevelCorners::default();
                for corner in 0..8 {
                    let (di, dj, dk) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
                    let wx = if di == 1 { frac[0] } else { 1.0 - frac[0] };
                    let wy = if dj == 1 { frac[1] } else { 1.0 - frac[1] };
                    let wz = if dk == 1 { frac[2] } else { 1.0 - frac[2] };
                    c.offsets[corner] = base + (((idx[2] + dk) * n + idx[1] + dj) * n + idx[0] + di) * self.features;
                    c.weights[corner] = wx * wy * wz;
                }
                base += n * n * n * self.features;
                c
            })
            .collect()
    }

    /// Concatenated interpolated features of every level (`levels * features`).
    pub fn encode(&self, x: &Vec3) -> Vec<f64> {
        self.encode_with(&self.corners(x))
    }

    fn encode_with(&self, corners: &[LevelCorners]) -> Vec<f64> {
        let f = self.features;
        let mut out = vec![0.0; corners.len() * f];
        for (l, c) in corners.iter().enumerate() {
            for k in 0..8 {
                let v = &self.values[c.offsets[k]..c.offsets[k] + f];
                for (o, val) in out[l * f..(l + 1) * f].iter_mut().zip(v) {
                    *o += c.weights[k] * val;
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticField {
    pub config: FieldConfig,
    pub grid: MultiResGrid,
    pub head_s: Mlp,
    pub head_l: Mlp,
}

impl SemanticField {
    /// All-zero grid and heads.
    pub fn zeros(config: &FieldConfig, bounds: Aabb) -> Result<Self> {
        config.validate()?;
        let e = config.encoding_dim();
        Ok(Self {
            config: config.clone(),
            grid: MultiResGrid::zeros(&config.resolutions, config.features_per_level, bounds),
            head_s: Mlp::zeros(&[e, config.hidden, config.spatial_dim])?,
            head_l: Mlp::zeros(&[e, config.hidden, config.language_dim])?,
        })
    }

    /// Grid values uniform in `±grid_scale`, Glorot-normal heads.
    pub fn init(config: &FieldConfig, bounds: Aabb, grid_scale: f64, seed: u64) -> Result<Self> {
        let mut f = Self::zeros(config, bounds)?;
        let mut r = rng::seeded(rng::derive_seed(seed, rng::tag("grid")));
        for v in f.grid.values_mut() {
            *v = r.random_range(-grid_scale..=grid_scale);
        }
        let e = config.encoding_dim();
        f.head_s = Mlp::init(&[e, config.hidden, config.spatial_dim], rng::derive_seed(seed, rng::tag("head_s")), false)?;
        f.head_l = Mlp::init(&[e, config.hidden, config.language_dim], rng::derive_seed(seed, rng::tag("head_l")), false)?;
        Ok(f)
    }

    pub fn num_params(&self) -> usize {
        self.grid.values.len() + self.head_s.num_params() + self.head_l.num_params()
    }

    /// `(f_s(x), f_l(x))`; points outside the bounds are clamped onto them.
    pub fn eval(&self, x: &Vec3) -> (Vec<f64>, Vec<f64>) {
        let e = self.grid.encode(x);
        (self.head_s.forward(&e).expect("encoding width"), self.head_l.forward(&e).expect("encoding width"))
    }

    fn flat_params(&self) -> Vec<f64> {
        let mut p = self.grid.values.clone();
        p.extend_from_slice(self.head_s.params());
        p.extend_from_slice(self.head_l.params());
        p
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: &FieldMetadata) -> Result<()> {
        let header = FieldHeader {
            config: self.config.clone(),
            bounds: *self.grid.bounds(),
            grid_len: self.grid.values.len(),
            head_s_len: self.head_s.num_params(),
            head_l_len: self.head_l.num_params(),
            meta: meta.clone(),
        };
        checkpoint::save(path, CHECKPOINT_KIND, &header, &self.flat_params())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, FieldMetadata)> {
        let (h, payload): (FieldHeader, Vec<f64>) = checkpoint::load(path, CHECKPOINT_KIND)?;
        let mut f = Self::zeros(&h.config, h.bounds)?;
        if h.grid_len != f.grid.values.len()
            || h.head_s_len != f.head_s.num_params()
            || h.head_l_len != f.head_l.num_params()
            || payload.len() != f.num_params()
        {
            return Err(Error::Format("field checkpoint shapes do not match its config".into()));
        }
        let (g, rest) = payload.split_at(h.grid_len);
        let (s, l) = rest.split_at(h.head_s_len);
        f.grid.values.copy_from_slice(g);
        f.head_s.params_mut().copy_from_slice(s);
        f.head_l.params_mut().copy_from_slice(l);
        Ok((f, h.meta))
    }
}

/// Provenance stored alongside field parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FieldMetadata {
    pub backbone: Option<BackboneKind>,
    pub train: Option<TrainConfig>,
    pub loss_trace: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FieldHeader {
    config: FieldConfig,
    bounds: Aabb,
    grid_len: usize,
    head_s_len: usize,
    head_l_len: usize,
    meta: FieldMetadata,
}

/// Feature images of the field at every foreground pixel of `depth`.
pub fn semantic_image_from_depth(
    field: &SemanticField,
    k: &CameraIntrinsics,
    pose: &PoseSE3,
    depth: &[f64],
) -> Result<(FeatureImage, FeatureImage)> {
    if depth.len() != k.width * k.height {
        return Err(Error::dims(k.width * k.height, depth.len()));
    }
    let (w, h) = (k.width, k.height);
    let rows: Vec<Vec<(Vec<f64>, Vec<f64>)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let d = depth[y * w + x];
                    if d > 0.0 {
                        let p = backproject(k, pose, &Vec2::new(x as f64, y as f64), d).expect("positive depth");
                        field.eval(&p)
                    } else {
                        (vec![0.0; field.config.spatial_dim], vec![0.0; field.config.language_dim])
                    }
                })
                .collect()
        })
        .collect();
    let mut fs = Image::zeros(w, h, field.config.spatial_dim);
    let mut fl = Image::zeros(w, h, field.config.language_dim);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (s, l)) in row.into_iter().enumerate() {
            fs.pixel_mut(x, y).copy_from_slice(&s);
            fl.pixel_mut(x, y).copy_from_slice(&l);
        }
    }
    Ok((FeatureImage::new(fs)?, FeatureImage::new(fl)?))
}

/// Renders depth, back-projects foreground pixels and evaluates both heads.
pub fn render_semantic_image(
    field: &SemanticField,
    scene: &Scene,
    k: &CameraIntrinsics,
    pose: &PoseSE3,
    cfg: &RenderConfig,
) -> Result<(FeatureImage, FeatureImage)> {
    let r = render(scene, k, pose, cfg)?;
    semantic_image_from_depth(field, k, pose, &r.rgbd.depth)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub frobenius: f64,
    pub cosine: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            frobenius: 1e-2,
            cosine: 1.0,
        }
    }
}

/// `a·b / (√(‖a‖²+ε²) √(‖b‖²+ε²))`.
pub fn csim(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = (a.iter().map(|x| x * x).sum::<f64>() + CSIM_EPSILON * CSIM_EPSILON).sqrt();
    let nb = (b.iter().map(|x| x * x).sum::<f64>() + CSIM_EPSILON * CSIM_EPSILON).sqrt();
    dot / (na * nb)
}

/// `∂ csim(r, g) / ∂r`.
fn csim_grad(r: &[f64], g: &[f64]) -> Vec<f64> {
    let dot: f64 = r.iter().zip(g).map(|(x, y)| x * y).sum();
    let nr2 = r.iter().map(|x| x * x).sum::<f64>() + CSIM_EPSILON * CSIM_EPSILON;
    let ng = (g.iter().map(|x| x * x).sum::<f64>() + CSIM_EPSILON * CSIM_EPSILON).sqrt();
    let nr = nr2.sqrt();
    r.iter().zip(g).map(|(ri, gi)| gi / (nr * ng) - dot * ri / (nr2 * nr * ng)).collect()
}

/// Distillation loss of one head over paired feature images.
///
/// `λ_F ‖I − Î‖²_F − λ_cos Σ_pixels csim(I, Î)`.
pub fn head_loss(rendered: &FeatureImage, gt: &FeatureImage, weights: &LossWeights) -> Result<f64> {
    if rendered.width() != gt.width() || rendered.height() != gt.height() || rendered.dim() != gt.dim() {
        return Err(Error::dims(gt.as_image().shape_string(), rendered.as_image().shape_string()));
    }
    let d = gt.dim();
    let (a, b) = (rendered.as_image().data(), gt.as_image().data());
    let frob: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let cos: f64 = a.chunks_exact(d).zip(b.chunks_exact(d)).map(|(x, y)| csim(x, y)).sum();
    Ok(weights.frobenius * frob - weights.cosine * cos)
}

/// Sum of [`head_loss`] over the spatial and language heads.
pub fn distill_loss(
    rendered_s: &FeatureImage,
    rendered_l: &FeatureImage,
    gt_s: &FeatureImage,
    gt_l: &FeatureImage,
    weights: &LossWeights,
) -> Result<f64> {
    Ok(head_loss(rendered_s, gt_s, weights)? + head_loss(rendered_l, gt_l, weights)?)
}

/// A back-projected training pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillSample {
    pub point: Vec3,
    pub gt_s: Vec<f64>,
    pub gt_l: Vec<f64>,
}

/// Gradient of the loss with respect to every field parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGradient {
    pub grid: Vec<f64>,
    pub head_s: Vec<f64>,
    pub head_l: Vec<f64>,
}

impl FieldGradient {
    pub fn zeros(field: &SemanticField) -> Self {
        Self {
            grid: vec![0.0; field.grid.values.len()],
            head_s: vec![0.0; field.head_s.num_params()],
            head_l: vec![0.0; field.head_l.num_params()],
        }
    }

    pub fn add(&mut self, other: &FieldGradient) {
        for (a, b) in [(&mut self.grid, &other.grid), (&mut self.head_s, &other.head_s), (&mut self.head_l, &other.head_l)] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

struct ChunkGradient {
    loss: f64,
    grid: Vec<(usize, f64)>,
    head_s: Vec<f64>,
    head_l: Vec<f64>,
}

fn chunk_gradient(field: &SemanticField, samples: &[&DistillSample], w: &LossWeights) -> ChunkGradient {
    let fdim = field.grid.features;
    let mut out = ChunkGradient {
        loss: 0.0,
        grid: Vec::with_capacity(samples.len() * field.grid.levels() * 8 * fdim),
        head_s: vec![0.0; field.head_s.num_params()],
        head_l: vec![0.0; field.head_l.num_params()],
    };
    for s in samples {
        let corners = field.grid.corners(&s.point);
        let enc = field.grid.encode_with(&corners);
        let mut grad_enc = vec![0.0; enc.len()];
        for (head, gt, acc) in [(&field.head_s, &s.gt_s, &mut out.head_s), (&field.head_l, &s.gt_l, &mut out.head_l)] {
            let cache = head.forward_cached(&enc).expect("encoding width");
            let r = cache.output();
            let frob: f64 = r.iter().zip(gt).map(|(a, b)| (a - b) * (a - b)).sum();
            out.loss += w.frobenius * frob - w.cosine * csim(r, gt);
            let cg = csim_grad(r, gt);
            let g: Vec<f64> = r
                .iter()
                .zip(gt)
                .zip(&cg)
                .map(|((a, b), c)| 2.0 * w.frobenius * (a - b) - w.cosine * c)
                .collect();
            let ge = head.backward(&cache, &g, acc);
            grad_enc.iter_mut().zip(&ge).for_each(|(a, b)| *a += b);
        }
        for (l, c) in corners.iter().enumerate() {
            for k in 0..8 {
                for f in 0..fdim {
                    out.grid.push((c.offsets[k] + f, c.weights[k] * grad_enc[l * fdim + f]));
                }
            }
        }
    }
    out
}

/// Summed loss over `samples` and its exact gradient.
///
/// Chunks are evaluated in parallel and reduced in index order, so the result
/// does not depend on the thread count.
pub fn loss_and_gradient(field: &SemanticField, samples: &[&DistillSample], weights: &LossWeights) -> (f64, FieldGradient) {
    let chunks: Vec<ChunkGradient> = samples
        .par_chunks(CHUNK)
        .map(|c| chunk_gradient(field, c, weights))
        .collect();
    let mut grad = FieldGradient::zeros(field);
    let mut loss = 0.0;
    for c in chunks {
        loss += c.loss;
        for (i, v) in c.grid {
            grad.grid[i] += v;
        }
        grad.head_s.iter_mut().zip(&c.head_s).for_each(|(a, b)| *a += b);
        grad.head_l.iter_mut().zip(&c.head_l).for_each(|(a, b)| *a += b);
    }
    (loss, grad)
}

/// Summed loss over `samples` without gradients.
pub fn sample_loss(field: &SemanticField, samples: &[DistillSample], weights: &LossWeights) -> f64 {
    let parts: Vec<f64> = samples
        .par_chunks(256)
        .map(|c| {
            c.iter()
                .map(|s| {
                    let (fs, fl) = field.eval(&s.point);
                    let fr = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
                    weights.frobenius * (fr(&fs, &s.gt_s) + fr(&fl, &s.gt_l))
                        - weights.cosine * (csim(&fs, &s.gt_s) + csim(&fl, &s.gt_l))
                })
                .sum()
        })
        .collect();
    parts.iter().sum()
}

/// A posed training view with its rendered depth and ground-truth features.
#[derive(Clone, Debug)]
pub struct TrainingView {
    pub intrinsics: CameraIntrinsics,
    pub pose: PoseSE3,
    pub rgbd: RGBDImage,
    pub gt_s: FeatureImage,
    pub gt_l: FeatureImage,
}

impl TrainingView {
    /// Renders `scene` at `pose` and labels it with the backbone and language oracles.
    pub fn render(
        scene: &Scene,
        k: &CameraIntrinsics,
        pose: &PoseSE3,
        kind: BackboneKind,
        field: &FieldConfig,
        oracle_seed: u64,
    ) -> Result<Self> {
        let r = render(scene, k, pose, &RenderConfig::default())?;
        let gt_s = extract_features(&r.rgbd, &r.labels, kind, field.spatial_dim, oracle_seed)?;
        let gt_l = language_features(&r.labels, field.language_dim, oracle_seed)?;
        Ok(Self {
            intrinsics: *k,
            pose: *pose,
            rgbd: r.rgbd,
            gt_s,
            gt_l,
        })
    }

    /// One sample per foreground pixel.
    pub fn samples(&self) -> Result<Vec<DistillSample>> {
        let (w, h) = (self.rgbd.width(), self.rgbd.height());
        if self.gt_s.width() != w || self.gt_s.height() != h || self.gt_l.width() != w || self.gt_l.height() != h {
            return Err(Error::dims(format!("{w}x{h} feature images"), format!("{}x{}", self.gt_s.width(), self.gt_s.height())));
        }
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let d = self.rgbd.depth_at(x, y);
                if d > 0.0 {
                    out.push(DistillSample {
                        point: backproject(&self.intrinsics, &self.pose, &Vec2::new(x as f64, y as f64), d)?,
                        gt_s: self.gt_s.pixel(x, y).to_vec(),
                        gt_l: self.gt_l.pixel(x, y).to_vec(),
                    });
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_pixels: usize,
    /// Adam step size for the heads.
    pub learning_rate: f64,
    /// Adam step size for grid values.
    pub grid_learning_rate: f64,
    /// Initial grid values are uniform in `±grid_init`.
    pub grid_init: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub field: FieldConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_pixels: 256,
            learning_rate: 2e-3,
            grid_learning_rate: 2e-2,
            grid_init: 1e-2,
            seed: 0,
            weights: LossWeights::default(),
            field: FieldConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.field.validate()?;
        if self.iterations == 0 || self.batch_pixels == 0 {
            return Err(Error::invalid("iterations and batch size must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(self.grid_learning_rate > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(self.weights.frobenius >= 0.0) || !(self.weights.cosine >= 0.0) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainedField {
    pub field: SemanticField,
    /// Per-iteration mean shifted batch loss (see [`shifted_loss`]).
    pub loss_trace: Vec<f64>,
    /// Mean shifted loss over all training samples before the first step.
    pub initial_loss: f64,
    /// Mean shifted loss over all training samples after the last step.
    pub final_loss: f64,
}

/// Loss shifted by its cosine lower bound so that a perfect fit scores 0.
///
/// Each sample contributes two cosine terms (one per head), so the shift is
/// `2 λ_cos` per sample.
pub fn shifted_loss(loss: f64, samples: usize, weights: &LossWeights) -> f64 {
    loss + 2.0 * weights.cosine * samples as f64
}

/// Fits a field to the views' features with Adam on random pixel batches.
pub fn train_field(scene: &Scene, views: &[TrainingView], cfg: &TrainConfig) -> Result<TrainedField> {
    cfg.validate()?;
    if views.len() < 2 {
        return Err(Error::invalid(format!("training needs at least 2 views, got {}", views.len())));
    }
    for v in views {
        if v.gt_s.dim() != cfg.field.spatial_dim || v.gt_l.dim() != cfg.field.language_dim {
            return Err(Error::dims(
                format!("features ({}, {})", cfg.field.spatial_dim, cfg.field.language_dim),
                format!("({}, {})", v.gt_s.dim(), v.gt_l.dim()),
            ));
        }
    }
    let mut samples = Vec::new();
    for v in views {
        samples.extend(v.samples()?);
    }
    if samples.is_empty() {
        return Err(Error::invalid("training views contain no foreground pixels"));
    }
    let mut field = SemanticField::init(&cfg.field, *scene.bounds(), cfg.grid_init, cfg.seed)?;
    let w = &cfg.weights;
    let mean_shifted = |f: &SemanticField| shifted_loss(sample_loss(f, &samples, w), samples.len(), w) / samples.len() as f64;
    let initial_loss = mean_shifted(&field);

    let adam = |lr: f64, n: usize| Adam::new(AdamConfig { learning_rate: lr, ..Default::default() }, n);
    let mut opt_grid = adam(cfg.grid_learning_rate, field.grid.values.len());
    let mut opt_s = adam(cfg.learning_rate, field.head_s.num_params());
    let mut opt_l = adam(cfg.learning_rate, field.head_l.num_params());
    let mut r = rng::seeded(rng::derive_seed(cfg.seed, rng::tag("batches")));
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut batch: Vec<&DistillSample> = Vec::with_capacity(cfg.batch_pixels);
    for it in 0..cfg.iterations {
        batch.clear();
        batch.extend((0..cfg.batch_pixels).map(|_| &samples[r.random_range(0..samples.len())]));
        let (loss, grad) = loss_and_gradient(&field, &batch, w);
        let mean = shifted_loss(loss, batch.len(), w) / batch.len() as f64;
        trace.push(mean);
        if !loss.is_finite() || grad.grid.iter().chain(&grad.head_s).chain(&grad.head_l).any(|g| !g.is_finite()) {
            return Err(Error::TrainingFailure { iteration: it, trace });
        }
        // cosine annealing to 10% of the base rate
        let scale = 0.1 + 0.45 * (1.0 + (std::f64::consts::PI * it as f64 / cfg.iterations as f64).cos());
        opt_grid.step_with_rate(field.grid.values_mut(), &grad.grid, cfg.grid_learning_rate * scale);
        opt_s.step_with_rate(field.head_s.params_mut(), &grad.head_s, cfg.learning_rate * scale);
        opt_l.step_with_rate(field.head_l.params_mut(), &grad.head_l, cfg.learning_rate * scale);
    }
    let final_loss = mean_shifted(&field);
    if !final_loss.is_finite() {
        return Err(Error::TrainingFailure {
            iteration: cfg.iterations,
            trace,
        });
    }
    Ok(TrainedField {
        field,
        loss_trace: trace,
        initial_loss,
        final_loss,
    })
}

/// Mean per-pixel cosine similarity over pixels where `mask` is true.
pub fn mean_cosine(a: &FeatureImage, b: &FeatureImage, mask: &[bool]) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() || a.dim() != b.dim() {
        return Err(Error::dims(a.as_image().shape_string(), b.as_image().shape_string()));
    }
    if mask.len() != a.width() * a.height() {
        return Err(Error::dims(a.width() * a.height(), mask.len()));
    }
    let d = a.dim();
    let (mut sum, mut n) = (0.0, 0usize);
    for ((x, y), &m) in a.as_image().data().chunks_exact(d).zip(b.as_image().data().chunks_exact(d)).zip(mask) {
        if m {
            sum += csim(x, y);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("mask selects no pixels"));
    }
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;

    fn tiny_config() -> FieldConfig {
        FieldConfig {
            resolutions: vec![2, 3],
            features_per_level: 2,
            hidden: 4,
            spatial_dim: 3,
            language_dim: 3,
        }
    }

    #[test]
    fn zero_heads_give_zero_outputs() {
        let f = SemanticField::zeros(&tiny_config(), Aabb::cube(1.0)).unwrap();
        let (s, l) = f.eval(&Vec3::new(0.2, -0.3, 0.9));
        assert!(s.iter().chain(&l).all(|v| *v == 0.0));
    }

    #[test]
    fn vertex_weights_are_one_hot() {
        let mut g = MultiResGrid::zeros(&[4, 8], 2, Aabb::cube(1.0));
        for (i, v) in g.values_mut().iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        let x = g.vertex_position(0, 1, 2, 3);
        let c = g.corners(&x);
        let hot: Vec<f64> = c[0].weights.iter().copied().filter(|w| *w > 0.0).collect();
        assert_eq!(hot.len(), 1);
        assert!((hot[0] - 1.0).abs() < 1e-12);
        let e = g.encode(&x);
        let off = g.vertex_offset(0, 1, 2, 3);
        assert!((e[0] - g.values()[off]).abs() < 1e-12 && (e[1] - g.values()[off + 1]).abs() < 1e-12);
    }

    #[test]
    fn midpoint_averages_vertices() {
        let mut g = MultiResGrid::zeros(&[4], 3, Aabb::cube(1.0));
        for (i, v) in g.values_mut().iter_mut().enumerate() {
            *v = (i as f64 * 1.3).cos();
        }
        let a = g.vertex_position(0, 1, 1, 2);
        let b = g.vertex_position(0, 2, 1, 2);
        let e = g.encode(&((a + b) * 0.5));
        let (oa, ob) = (g.vertex_offset(0, 1, 1, 2), g.vertex_offset(0, 2, 1, 2));
        for f in 0..3 {
            assert!((e[f] - 0.5 * (g.values()[oa + f] + g.values()[ob + f])).abs() < 1e-9);
        }
    }

    #[test]
    fn toy_loss_matches_hand_computation() {
        // pixels: r = [(1,0), (0,2)], g = [(1,1), (0,1)]
        let r = FeatureImage::new(Image::from_vec(2, 1, 3, vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0]).unwrap()).unwrap();
        let g = FeatureImage::new(Image::from_vec(2, 1, 3, vec![1.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap()).unwrap();
        let w = LossWeights { frobenius: 0.5, cosine: 2.0 };
        // ‖r − g‖² = 1 + 1 = 2; csim = 1/√2 + 1
        let expect = 0.5 * 2.0 - 2.0 * (1.0 / 2f64.sqrt() + 1.0);
        assert!((head_loss(&r, &g, &w).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn identical_and_zero_rendering() {
        let g = FeatureImage::new(Image::from_fn(3, 2, 4, |x, y, c| 0.1 + (x + 2 * y + c) as f64)).unwrap();
        let w = LossWeights::default();
        assert!((distill_loss(&g, &g, &g, &g, &w).unwrap() + 2.0 * 6.0).abs() < 1e-12);
        let z = FeatureImage::zeros(3, 2, 4);
        let frob: f64 = g.as_image().data().iter().map(|v| v * v).sum();
        assert!((head_loss(&z, &g, &w).unwrap() - w.frobenius * frob).abs() < 1e-12);
        assert!(head_loss(&z, &FeatureImage::zeros(2, 3, 4), &w).is_err());
    }

    #[test]
    fn zero_cosine_weight_at_minimum_has_zero_gradient() {
        let f = SemanticField::init(&tiny_config(), Aabb::cube(1.0), 0.3, 4).unwrap();
        let x = Vec3::new(0.1, 0.4, -0.2);
        let (s, l) = f.eval(&x);
        let sample = DistillSample { point: x, gt_s: s, gt_l: l };
        let w = LossWeights { frobenius: 1.0, cosine: 0.0 };
        let (loss, g) = loss_and_gradient(&f, &[&sample], &w);
        assert_eq!(loss, 0.0);
        assert!(g.grid.iter().chain(&g.head_s).chain(&g.head_l).all(|v| *v == 0.0));
    }
}
