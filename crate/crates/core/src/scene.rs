//! Explicit Gaussian-primitive scenes and a deterministic volumetric renderer.
//!
//! Every pixel marches its ray through the scene bounds at a fixed step.
//! Density at a sample is `κ Σᵢ αᵢ exp(-½ dᵢᵀ Σᵢ⁻¹ dᵢ)` and samples are
//! composited front to back; color is the density-weighted mix of primitive
//! colors and depth is the weight-averaged sample depth.

use std::path::Path;

use nalgebra::{Rotation3, UnitQuaternion};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{random_rotation, CameraIntrinsics, Mat3, PoseSE3, Rotation, Vec3};
use crate::image::{Image, LabelImage};
use crate::rng;

pub const SCENE_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if (0..3).any(|i| !(min[i] < max[i]) || !min[i].is_finite() || !max[i].is_finite()) {
            return Err(Error::invalid(format!("degenerate bounds {min:?} .. {max:?}")));
        }
        Ok(Self { min, max })
    }

    pub fn cube(half: f64) -> Self {
        Self {
            min: Vec3::repeat(-half),
            max: Vec3::repeat(half),
        }
    }

    pub fn diagonal(&self) -> f64 {
        (self.max - self.min).norm()
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn clamp(&self, p: &Vec3) -> Vec3 {
        Vec3::from_fn(|i, _| p[i].clamp(self.min[i], self.max[i]))
    }

    /// Parametric interval `[t0, t1]` where `origin + t * dir` is inside the box.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if dir[i].abs() < 1e-15 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[i];
            let (a, b) = ((self.min[i] - origin[i]) * inv, (self.max[i] - origin[i]) * inv);
            let (a, b) = if a < b { (a, b) } else { (b, a) };
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        (t0 < t1).then_some((t0, t1))
    }
}

/// One anisotropic Gaussian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrimitive {
    pub mean: Vec3,
    pub scale: Vec3,
    pub orientation: Rotation,
    pub opacity: f64,
    pub color: [f64; 3],
    pub label: u16,
}

impl GaussianPrimitive {
    pub fn validate(&self) -> Result<()> {
        if !self.mean.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("primitive mean must be finite"));
        }
        if !self.scale.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(Error::invalid(format!("primitive scale must be > 0, got {:?}", self.scale)));
        }
        if !(self.opacity > 0.0 && self.opacity <= 1.0) {
            return Err(Error::invalid(format!("opacity must be in (0, 1], got {}", self.opacity)));
        }
        if !self.color.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(Error::invalid(format!("color must be in [0, 1], got {:?}", self.color)));
        }
        if self.label == LabelImage::BACKGROUND {
            return Err(Error::invalid("label value is reserved for background"));
        }
        Ok(())
    }

    /// Σ⁻¹ = R S⁻² Rᵀ.
    pub fn inverse_covariance(&self) -> Mat3 {
        let r = self.orientation.matrix();
        let s = Mat3::from_diagonal(&self.scale.map(|v| 1.0 / (v * v)));
        r * s * r.transpose()
    }

    /// Maps world points into the frame where this Gaussian is isotropic with unit variance.
    fn whitening(&self) -> Mat3 {
        let inv_s = Mat3::from_diagonal(&self.scale.map(|v| 1.0 / v));
        inv_s * self.orientation.matrix().transpose()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    primitives: Vec<GaussianPrimitive>,
    background: [f64; 3],
    bounds: Aabb,
}

impl Scene {
    pub fn new(primitives: Vec<GaussianPrimitive>, background: [f64; 3], bounds: Aabb) -> Result<Self> {
        if primitives.is_empty() {
            return Err(Error::invalid("scene needs at least one primitive"));
        }
        Aabb::new(bounds.min, bounds.max)?;
        for (i, p) in primitives.iter().enumerate() {
            p.validate()
                .map_err(|e| Error::invalid(format!("primitive {i}: {e}")))?;
            if !bounds.contains(&p.mean) {
                return Err(Error::invalid(format!("primitive {i}: mean outside scene bounds")));
            }
        }
        if !background.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(Error::invalid("background color must be in [0, 1]"));
        }
        Ok(Self {
            primitives,
            background,
            bounds,
        })
    }

    pub fn primitives(&self) -> &[GaussianPrimitive] {
        &self.primitives
    }

    pub fn background(&self) -> [f64; 3] {
        self.background
    }

    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    /// Sorted, deduplicated semantic classes present in the scene.
    pub fn classes(&self) -> Vec<u16> {
        let mut c: Vec<u16> = self.primitives.iter().map(|p| p.label).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = SceneFile::from(self);
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let file: SceneFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_owned(),
            message: format!("line {}, column {}: {e}", e.line(), e.column()),
        })?;
        file.into_scene().map_err(|e| Error::Parse {
            path: path.to_owned(),
            message: e.to_string(),
        })
    }
}

/// On-disk scene layout: one array per attribute, indexed by primitive.
#[derive(Debug, Serialize, Deserialize)]
pub struct SceneFile {
    pub version: u32,
    pub background: [f64; 3],
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    pub means: Vec<[f64; 3]>,
    pub scales: Vec<[f64; 3]>,
    /// Unit quaternions `[w, x, y, z]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quaternions: Option<Vec<[f64; 4]>>,
    /// Row-major 3x3 rotation matrices, accepted in place of `quaternions`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrices: Option<Vec<[[f64; 3]; 3]>>,
    pub opacity: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    pub label: Vec<u16>,
}

impl From<&Scene> for SceneFile {
    fn from(s: &Scene) -> Self {
        let quats = s
            .primitives
            .iter()
            .map(|p| {
                let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(
                    *p.orientation.matrix(),
                ));
                [q.w, q.i, q.j, q.k]
            })
            .collect();
        SceneFile {
            version: SCENE_FORMAT_VERSION,
            background: s.background,
            bounds_min: s.bounds.min.into(),
            bounds_max: s.bounds.max.into(),
            means: s.primitives.iter().map(|p| p.mean.into()).collect(),
            scales: s.primitives.iter().map(|p| p.scale.into()).collect(),
            quaternions: Some(quats),
            matrices: None,
            opacity: s.primitives.iter().map(|p| p.opacity).collect(),
            color: s.primitives.iter().map(|p| p.color).collect(),
            label: s.primitives.iter().map(|p| p.label).collect(),
        }
    }
}

impl SceneFile {
    pub fn into_scene(self) -> Result<Scene> {
        if self.version != SCENE_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "scene version {} is not supported (expected {SCENE_FORMAT_VERSION})",
                self.version
            )));
        }
        let n = self.means.len();
        let check = |name: &str, len: usize| {
            if len == n {
                Ok(())
            } else {
                Err(Error::invalid(format!("field `{name}` has {len} entries, `means` has {n}")))
            }
        };
        check("scales", self.scales.len())?;
        check("opacity", self.opacity.len())?;
        check("color", self.color.len())?;
        check("label", self.label.len())?;
        let rotations: Vec<Rotation> = match (&self.quaternions, &self.matrices) {
            (Some(q), _) => {
                check("quaternions", q.len())?;
                q.iter()
                    .enumerate()
                    .map(|(i, q)| {
                        let quat = nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]);
                        if (quat.norm() - 1.0).abs() > 1e-6 {
                            return Err(Error::invalid(format!("quaternions[{i}] is not unit length")));
                        }
                        let m = UnitQuaternion::from_quaternion(quat).to_rotation_matrix();
                        Ok(Rotation::from_matrix_unchecked(*m.matrix()))
                    })
                    .collect::<Result<_>>()?
            }
            (None, Some(ms)) => {
                check("matrices", ms.len())?;
                ms.iter()
                    .enumerate()
                    .map(|(i, m)| {
                        let m = Mat3::from_fn(|r, c| m[r][c]);
                        Rotation::from_matrix(m)
                            .map_err(|e| Error::invalid(format!("matrices[{i}]: {e}")))
                    })
                    .collect::<Result<_>>()?
            }
            (None, None) => return Err(Error::invalid("scene needs `quaternions` or `matrices`")),
        };
        let primitives = (0..n)
            .map(|i| GaussianPrimitive {
                mean: self.means[i].into(),
                scale: self.scales[i].into(),
                orientation: rotations[i],
                opacity: self.opacity[i],
                color: self.color[i],
                label: self.label[i],
            })
            .collect();
        Scene::new(
            primitives,
            self.background,
            Aabb::new(self.bounds_min.into(), self.bounds_max.into())?,
        )
    }
}

/// Parameters for procedurally generated scenes.
///
/// Primitives are grouped into one spatial cluster ("object") per class; each
/// class has a base color and every primitive jitters it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub primitives: usize,
    pub classes: usize,
    pub bounds_half_extent: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Standard deviation of primitive means around their class center.
    pub cluster_spread: f64,
    pub background: [f64; 3],
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            primitives: 72,
            classes: 8,
            bounds_half_extent: 1.0,
            scale_min: 0.05,
            scale_max: 0.15,
            cluster_spread: 0.22,
            background: [0.08, 0.08, 0.1],
        }
    }
}

pub const DEFAULT_SCENE_SEED: u64 = 20251;

/// The scene used by examples, acceptance checks and experiment defaults.
pub fn default_scene() -> Scene {
    generate_scene(&SceneSpec::default(), DEFAULT_SCENE_SEED).expect("default spec is valid")
}

pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    if spec.primitives == 0 || spec.classes == 0 {
        return Err(Error::invalid("scene spec needs at least one primitive and one class"));
    }
    if spec.classes >= LabelImage::BACKGROUND as usize {
        return Err(Error::invalid("too many classes"));
    }
    if !(spec.bounds_half_extent > 0.0)
        || !(spec.scale_min > 0.0)
        || !(spec.scale_max >= spec.scale_min)
        || !(spec.cluster_spread >= 0.0)
    {
        return Err(Error::invalid(format!("degenerate scene spec {spec:?}")));
    }
    let bounds = Aabb::cube(spec.bounds_half_extent);
    let margin = (2.0 * spec.scale_max).min(0.35 * spec.bounds_half_extent);
    let inner = Aabb::cube(spec.bounds_half_extent - margin);

    for attempt in 0u64.. {
        let mut rng = rng::seeded(rng::derive_seed(seed, attempt));
        let centers: Vec<Vec3> = (0..spec.classes)
            .map(|_| Vec3::from_fn(|i, _| rng.random_range(inner.min[i]..=inner.max[i])))
            .collect();
        let base_colors: Vec<[f64; 3]> = (0..spec.classes)
            .map(|_| std::array::from_fn(|_| rng.random_range(0.2..0.95)))
            .collect();
        let primitives: Vec<GaussianPrimitive> = (0..spec.primitives)
            .map(|i| {
                let label = (i % spec.classes) as u16;
                let offset = Vec3::from_fn(|_, _| {
                    spec.cluster_spread * rng.sample::<f64, _>(rand_distr::StandardNormal)
                });
                let mean = inner.clamp(&(centers[label as usize] + offset));
                let scale = Vec3::from_fn(|_, _| rng.random_range(spec.scale_min..=spec.scale_max));
                let orientation = random_rotation(&mut rng);
                let opacity = rng.random_range(0.7..=1.0);
                let base = base_colors[label as usize];
                let color = std::array::from_fn(|c| {
                    (base[c] + rng.random_range(-0.15..0.15)).clamp(0.0, 1.0)
                });
                GaussianPrimitive {
                    mean,
                    scale,
                    orientation,
                    opacity,
                    color,
                    label,
                }
            })
            .collect();
        if spec.primitives < 3 || !means_collinear(&primitives) {
            return Scene::new(primitives, spec.background, bounds);
        }
    }
    unreachable!()
}

fn means_collinear(prims: &[GaussianPrimitive]) -> bool {
    let a = prims[0].mean;
    let Some(b) = prims.iter().map(|p| p.mean).find(|m| (m - a).norm() > 1e-6) else {
        return true;
    };
    let dir = (b - a).normalize();
    prims.iter().all(|p| (p.mean - a).cross(&dir).norm() < 1e-6)
}

/// Camera used by examples and experiment defaults: 96x96 pixels, focal 100.
pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::centered(96, 100.0)
}

/// Camera on a sphere around the origin looking at it, world `+z` up.
pub fn orbit_pose(azimuth_deg: f64, elevation_deg: f64, radius: f64) -> Result<PoseSE3> {
    let (a, e) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    let eye = Vec3::new(radius * e.cos() * a.cos(), radius * e.cos() * a.sin(), radius * e.sin());
    PoseSE3::look_at(&eye, &Vec3::zeros(), &Vec3::z())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    /// Number of march steps across the bounds diagonal; step Δ = diagonal / steps.
    pub steps: usize,
    /// Global multiplier κ on the summed Gaussian density (per scene unit).
    pub density_scale: f64,
    /// Mahalanobis radius beyond which a primitive's density is treated as zero.
    pub cutoff: f64,
    /// Pixels with total compositing weight below this are background (depth 0).
    pub coverage_threshold: f64,
    /// March stops once transmittance falls below this.
    pub min_transmittance: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            steps: 256,
            density_scale: 120.0,
            cutoff: 4.0,
            coverage_threshold: 0.01,
            min_transmittance: 1e-7,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::invalid("render needs at least 2 steps"));
        }
        if !(self.density_scale > 0.0) || !(self.cutoff > 0.0) {
            return Err(Error::invalid("density scale and cutoff must be positive"));
        }
        Ok(())
    }

    pub fn step_length(&self, bounds: &Aabb) -> f64 {
        bounds.diagonal() / self.steps as f64
    }
}

/// RGB in `[0, 1]` plus expected depth (0 marks background).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RGBDImage {
    pub rgb: Image,
    pub depth: Vec<f64>,
}

impl RGBDImage {
    pub fn new(rgb: Image, depth: Vec<f64>) -> Result<Self> {
        if rgb.channels() != 3 {
            return Err(Error::dims("3 rgb channels", rgb.channels()));
        }
        if depth.len() != rgb.pixel_count() {
            return Err(Error::dims(rgb.pixel_count(), depth.len()));
        }
        if depth.iter().any(|d| !(*d >= 0.0)) {
            return Err(Error::invalid("depth must be non-negative"));
        }
        Ok(Self { rgb, depth })
    }

    pub fn width(&self) -> usize {
        self.rgb.width()
    }

    pub fn height(&self) -> usize {
        self.rgb.height()
    }

    #[inline]
    pub fn depth_at(&self, x: usize, y: usize) -> f64 {
        self.depth[y * self.rgb.width() + x]
    }

    pub fn depth_image(&self) -> Image {
        Image::from_vec(self.width(), self.height(), 1, self.depth.clone()).expect("shape")
    }

    pub fn foreground_count(&self) -> usize {
        self.depth.iter().filter(|&&d| d > 0.0).count()
    }

    /// Writes `depth` as little-endian f32 plus a JSON sidecar with its shape.
    pub fn save_depth(&self, bin: impl AsRef<Path>, sidecar: impl AsRef<Path>) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.depth.len() * 4);
        for d in &self.depth {
            bytes.extend_from_slice(&(*d as f32).to_le_bytes());
        }
        std::fs::write(bin, bytes)?;
        let meta = DepthSidecar {
            width: self.width(),
            height: self.height(),
            dtype: "f32le".into(),
            scale: 1.0,
            background: 0.0,
        };
        std::fs::write(sidecar, serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load_depth(bin: impl AsRef<Path>, sidecar: impl AsRef<Path>) -> Result<(usize, usize, Vec<f64>)> {
        let meta: DepthSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar)?)?;
        if meta.dtype != "f32le" {
            return Err(Error::Format(format!("unsupported depth dtype {}", meta.dtype)));
        }
        let bytes = std::fs::read(bin)?;
        if bytes.len() != meta.width * meta.height * 4 {
            return Err(Error::dims(meta.width * meta.height * 4, bytes.len()));
        }
        let depth = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64 / meta.scale)
            .collect();
        Ok((meta.width, meta.height, depth))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DepthSidecar {
    width: usize,
    height: usize,
    dtype: String,
    /// Stored value = depth * scale.
    scale: f64,
    background: f64,
}

/// Full render output: image, labels and per-pixel compositing totals.
#[derive(Clone, Debug)]
pub struct Render {
    pub rgbd: RGBDImage,
    pub labels: LabelImage,
    /// Σⱼ wⱼ per pixel.
    pub coverage: Vec<f64>,
    /// Transmittance left after the last sample, per pixel.
    pub transmittance: Vec<f64>,
}

/// Everything recorded while marching one ray.
#[derive(Clone, Debug, Default)]
pub struct RayTrace {
    pub sample_depths: Vec<f64>,
    pub weights: Vec<f64>,
    pub final_transmittance: f64,
    /// Total compositing weight attributed to each primitive (scene order).
    pub primitive_weights: Vec<f64>,
    pub rgb: [f64; 3],
    pub depth: f64,
}

struct Candidate {
    index: usize,
    whitened_origin: Vec3,
    whitened_dir: Vec3,
    t_enter: f64,
    t_exit: f64,
}

struct RayResult {
    rgb: [f64; 3],
    depth: f64,
    coverage: f64,
    transmittance: f64,
    dominant: Option<usize>,
}

fn march(
    scene: &Scene,
    cfg: &RenderConfig,
    origin: &Vec3,
    dir: &Vec3,
    whitening: &[Mat3],
    mut trace: Option<&mut RayTrace>,
) -> RayResult {
    let background = scene.background;
    let mut result = RayResult {
        rgb: background,
        depth: 0.0,
        coverage: 0.0,
        transmittance: 1.0,
        dominant: None,
    };
    let Some((t_near, t_far)) = scene.bounds.intersect(origin, dir) else {
        return result;
    };
    let t_near = t_near.max(1e-6);
    if t_far <= t_near {
        return result;
    }
    let step = cfg.step_length(&scene.bounds);
    let dir_len = dir.norm();
    let dt = step / dir_len;
    let cutoff2 = cfg.cutoff * cfg.cutoff;

    let mut candidates: Vec<Candidate> = Vec::new();
    for (i, p) in scene.primitives.iter().enumerate() {
        let o = whitening[i] * (origin - p.mean);
        let d = whitening[i] * dir;
        let a = d.norm_squared();
        let b = o.dot(&d);
        let qmin = o.norm_squared() - b * b / a;
        if qmin > cutoff2 {
            continue;
        }
        let t_mid = -b / a;
        let half = ((cutoff2 - qmin) / a).sqrt();
        if t_mid + half < t_near || t_mid - half > t_far {
            continue;
        }
        candidates.push(Candidate {
            index: i,
            whitened_origin: o,
            whitened_dir: d,
            t_enter: t_mid - half,
            t_exit: t_mid + half,
        });
    }
    let mut per_prim = vec![0.0; candidates.len()];
    if let Some(tr) = trace.as_deref_mut() {
        tr.primitive_weights = vec![0.0; scene.primitives.len()];
    }
    if candidates.is_empty() {
        return result;
    }
    let first = candidates.iter().map(|c| c.t_enter).fold(f64::INFINITY, f64::min);
    let last = candidates.iter().map(|c| c.t_exit).fold(f64::NEG_INFINITY, f64::max);

    let n_steps = ((t_far - t_near) / dt).ceil() as usize;
    let j_start = if first > t_near { ((first - t_near) / dt - 0.5).floor().max(0.0) as usize } else { 0 };

    let mut transmittance = 1.0;
    let mut color = [0.0; 3];
    let mut depth_acc = 0.0;
    let mut weight_acc = 0.0;
    let mut densities = vec![0.0; candidates.len()];

    for j in j_start..n_steps {
        let t = t_near + (j as f64 + 0.5) * dt;
        if t > last {
            break;
        }
        let mut sigma = 0.0;
        for (k, c) in candidates.iter().enumerate() {
            densities[k] = if t >= c.t_enter && t <= c.t_exit {
                let x = c.whitened_origin + c.whitened_dir * t;
                let s = cfg.density_scale
                    * scene.primitives[c.index].opacity
                    * (-0.5 * x.norm_squared()).exp();
                sigma += s;
                s
            } else {
                0.0
            };
        }
        if sigma <= 0.0 {
            continue;
        }
        let alpha = 1.0 - (-sigma * step).exp();
        let w = transmittance * alpha;
        for (k, c) in candidates.iter().enumerate() {
            if densities[k] > 0.0 {
                let share = densities[k] / sigma;
                per_prim[k] += w * share;
                let pc = scene.primitives[c.index].color;
                for ch in 0..3 {
                    color[ch] += w * share * pc[ch];
                }
            }
        }
        depth_acc += w * t;
        weight_acc += w;
        transmittance *= 1.0 - alpha;
        if let Some(tr) = trace.as_deref_mut() {
            tr.sample_depths.push(t);
            tr.weights.push(w);
        }
        if transmittance < cfg.min_transmittance {
            break;
        }
    }

    for ch in 0..3 {
        result.rgb[ch] = color[ch] + transmittance * background[ch];
    }
    result.coverage = weight_acc;
    result.transmittance = transmittance;
    if weight_acc >= cfg.coverage_threshold {
        result.depth = depth_acc / weight_acc.max(1e-12);
        let mut best: Option<(usize, f64)> = None;
        for (k, &w) in per_prim.iter().enumerate() {
            let idx = candidates[k].index;
            // ties go to the lower scene index so the result is order independent
            let better = match best {
                None => true,
                Some((bi, bw)) => w > bw || (w == bw && idx < bi),
            };
            if better {
                best = Some((idx, w));
            }
        }
        result.dominant = best.map(|(i, _)| i);
    }
    if let Some(tr) = trace {
        for (k, c) in candidates.iter().enumerate() {
            tr.primitive_weights[c.index] = per_prim[k];
        }
        tr.final_transmittance = transmittance;
        tr.rgb = result.rgb;
        tr.depth = result.depth;
    }
    result
}

fn camera_ray(k: &CameraIntrinsics, pose: &PoseSE3, u: f64, v: f64) -> (Vec3, Vec3) {
    let d = pose.rotation.apply(&k.ray_direction(u, v));
    (pose.translation, d)
}

/// Renders color, expected depth and dominant-primitive labels in one pass.
pub fn render(scene: &Scene, k: &CameraIntrinsics, pose: &PoseSE3, cfg: &RenderConfig) -> Result<Render> {
    cfg.validate()?;
    k.validate()?;
    let whitening: Vec<Mat3> = scene.primitives.iter().map(|p| p.whitening()).collect();
    let (w, h) = (k.width, k.height);
    let rows: Vec<Vec<RayResult>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let (o, d) = camera_ray(k, pose, x as f64, y as f64);
                    march(scene, cfg, &o, &d, &whitening, None)
                })
                .collect()
        })
        .collect();
    let mut rgb = Image::zeros(w, h, 3);
    let mut depth = vec![0.0; w * h];
    let mut labels = LabelImage::filled(w, h, LabelImage::BACKGROUND);
    let mut coverage = vec![0.0; w * h];
    let mut transmittance = vec![0.0; w * h];
    for (y, row) in rows.into_iter().enumerate() {
        for (x, r) in row.into_iter().enumerate() {
            rgb.pixel_mut(x, y).copy_from_slice(&r.rgb);
            let i = y * w + x;
            depth[i] = r.depth;
            coverage[i] = r.coverage;
            transmittance[i] = r.transmittance;
            if r.depth > 0.0 {
                if let Some(p) = r.dominant {
                    labels.set(x, y, scene.primitives[p].label);
                }
            }
        }
    }
    Ok(Render {
        rgbd: RGBDImage { rgb, depth },
        labels,
        coverage,
        transmittance,
    })
}

pub fn render_rgbd(scene: &Scene, k: &CameraIntrinsics, pose: &PoseSE3, cfg: &RenderConfig) -> Result<RGBDImage> {
    Ok(render(scene, k, pose, cfg)?.rgbd)
}

/// Per-pixel label of the primitive with the largest compositing weight.
pub fn render_label_image(scene: &Scene, k: &CameraIntrinsics, pose: &PoseSE3) -> Result<LabelImage> {
    Ok(render(scene, k, pose, &RenderConfig::default())?.labels)
}

/// Marches a single pixel's ray and records every sample.
pub fn trace_pixel(
    scene: &Scene,
    k: &CameraIntrinsics,
    pose: &PoseSE3,
    cfg: &RenderConfig,
    u: f64,
    v: f64,
) -> Result<RayTrace> {
    cfg.validate()?;
    let whitening: Vec<Mat3> = scene.primitives.iter().map(|p| p.whitening()).collect();
    let (o, d) = camera_ray(k, pose, u, v);
    let mut trace = RayTrace {
        final_transmittance: 1.0,
        rgb: scene.background,
        ..Default::default()
    };
    march(scene, cfg, &o, &d, &whitening, Some(&mut trace));
    if trace.primitive_weights.is_empty() {
        trace.primitive_weights = vec![0.0; scene.primitives.len()];
    }
    Ok(trace)
}
