//! Coarse stage: a perceptron mapping a global embedding to a Gaussian
//! mixture over `(camera center, rotation vector)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::geometry::{exp_so3, log_so3, AxisAngle, PoseSE3, Vec3};
use crate::nn::{Adam, AdamConfig, Mlp};

/// Values per mixture component: weight logit, 6 means, 6 raw variances.
pub const COMPONENT_WIDTH: usize = 13;
const CHECKPOINT_KIND: &str = "inverse-model";
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmComponent {
    pub weight: f64,
    /// `[t_x, t_y, t_z, r_x, r_y, r_z]`, rotation block canonical.
    pub mean: [f64; 6],
    pub variance: [f64; 6],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseDistribution {
    pub components: Vec<GmmComponent>,
}

impl PoseDistribution {
    /// Index of the heaviest component; ties go to the lowest index.
    pub fn mode_index(&self) -> usize {
        let mut best = 0;
        for (i, c) in self.components.iter().enumerate() {
            if c.weight > self.components[best].weight {
                best = i;
            }
        }
        best
    }
}

/// Pose at the mean of the heaviest component.
pub fn coarse_mode(dist: &PoseDistribution) -> Result<PoseSE3> {
    if dist.components.is_empty() {
        return Err(Error::invalid("pose distribution has no components"));
    }
    let m = &dist.components[dist.mode_index()].mean;
    let rot = exp_so3(&AxisAngle::new(m[3], m[4], m[5]))?;
    PoseSE3::new(rot, Vec3::new(m[0], m[1], m[2]))
}

/// Regression target for a pose: camera center and canonical rotation vector.
pub fn pose_target(pose: &PoseSE3) -> Result<[f64; 6]> {
    let r = log_so3(&pose.rotation)?.0;
    let t = pose.translation;
    Ok([t.x, t.y, t.z, r.x, r.y, r.z])
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Rotation target equivalent to `target` that lies closest to `pred`.
///
/// A rotation vector `r` and `r - 2π r̂` describe the same rotation; picking
/// the nearer one keeps the loss continuous across the `θ = π` boundary.
fn aligned_rotation(target: &[f64; 6], pred: &[f64]) -> [f64; 6] {
    let r = AxisAngle::new(target[3], target[4], target[5]);
    let alt = r.antipode().0;
    let d = |v: &Vec3| (0..3).map(|i| (v[i] - pred[3 + i]).powi(2)).sum::<f64>();
    let mut out = *target;
    if d(&alt) < d(&r.0) {
        out[3..6].copy_from_slice(alt.as_slice());
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InverseConfig {
    pub components: usize,
    pub hidden: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for InverseConfig {
    fn default() -> Self {
        Self {
            components: 1,
            hidden: 128,
            iterations: 4000,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InverseModel {
    pub mlp: Mlp,
    pub components: usize,
    /// Per-dimension embedding mean removed before the network.
    pub input_mean: Vec<f64>,
    /// Per-dimension embedding scale divided out before the network.
    pub input_scale: Vec<f64>,
}

impl InverseModel {
    pub fn new(embedding_dim: usize, cfg: &InverseConfig, zero_last: bool) -> Result<Self> {
        if cfg.components == 0 {
            return Err(Error::invalid("inverse model needs at least one component"));
        }
        let sizes = [embedding_dim, cfg.hidden, cfg.hidden, cfg.components * COMPONENT_WIDTH];
        Ok(Self {
            mlp: Mlp::init(&sizes, cfg.seed, zero_last)?,
            components: cfg.components,
            input_mean: vec![0.0; embedding_dim],
            input_scale: vec![1.0; embedding_dim],
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    fn standardize(&self, e: &[f64]) -> Result<Vec<f64>> {
        if e.len() != self.embedding_dim() {
            return Err(Error::dims(self.embedding_dim(), e.len()));
        }
        Ok(e.iter()
            .zip(&self.input_mean)
            .zip(&self.input_scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect())
    }

    fn distribution(&self, raw: &[f64]) -> PoseDistribution {
        let logits: Vec<f64> = (0..self.components).map(|k| raw[k * COMPONENT_WIDTH]).collect();
        let lse = log_sum_exp(&logits);
        let components = (0..self.components)
            .map(|k| {
                let o = &raw[k * COMPONENT_WIDTH..(k + 1) * COMPONENT_WIDTH];
                let mut mean = [0.0; 6];
                mean.copy_from_slice(&o[1..7]);
                let r = AxisAngle::new(mean[3], mean[4], mean[5]).canonical().0;
                mean[3..6].copy_from_slice(r.as_slice());
                GmmComponent {
                    weight: (logits[k] - lse).exp(),
                    mean,
                    variance: std::array::from_fn(|j| softplus(o[7 + j])),
                }
            })
            .collect();
        PoseDistribution { components }
    }

    pub fn predict(&self, embedding: &[f64]) -> Result<PoseDistribution> {
        let raw = self.mlp.forward(&self.standardize(embedding)?)?;
        Ok(self.distribution(&raw))
    }

    /// Loss over `(embedding, target)` pairs and its gradient in the network parameters.
    ///
    /// One component: mean squared error of the mean. Several: mixture negative log-likelihood.
    pub fn loss_and_gradient(&self, pairs: &[(Vec<f64>, [f64; 6])]) -> Result<(f64, Vec<f64>)> {
        let n = pairs.len() as f64;
        let mut grad = vec![0.0; self.mlp.num_params()];
        let mut loss = 0.0;
        for (e, target) in pairs {
            let cache = self.mlp.forward_cached(&self.standardize(e)?)?;
            let raw = cache.output();
            let mut g = vec![0.0; raw.len()];
            if self.components == 1 {
                let y = aligned_rotation(target, &raw[1..7]);
                for j in 0..6 {
                    let diff = raw[1 + j] - y[j];
                    loss += diff * diff / n;
                    g[1 + j] = 2.0 * diff / n;
                }
            } else {
                let kk = self.components;
                let logits: Vec<f64> = (0..kk).map(|k| raw[k * COMPONENT_WIDTH]).collect();
                let lse = log_sum_exp(&logits);
                let mut joint = vec![0.0; kk];
                let mut ys = Vec::with_capacity(kk);
                for k in 0..kk {
                    let o = &raw[k * COMPONENT_WIDTH..(k + 1) * COMPONENT_WIDTH];
                    let y = aligned_rotation(target, &o[1..7]);
                    let mut ll = logits[k] - lse;
                    for j in 0..6 {
                        let v = softplus(o[7 + j]);
                        let d = y[j] - o[1 + j];
                        ll -= 0.5 * (LN_2PI + v.ln() + d * d / v);
                    }
                    joint[k] = ll;
                    ys.push(y);
                }
                let total = log_sum_exp(&joint);
                loss -= total / n;
                for k in 0..kk {
                    let base = k * COMPONENT_WIDTH;
                    let gamma = (joint[k] - total).exp();
                    let pi = (logits[k] - lse).exp();
                    g[base] = (pi - gamma) / n;
                    for j in 0..6 {
                        let rv = raw[base + 7 + j];
                        let v = softplus(rv);
                        let d = ys[k][j] - raw[base + 1 + j];
                        g[base + 1 + j] = -gamma * d / v / n;
                        g[base + 7 + j] = gamma * 0.5 * (1.0 / v - d * d / (v * v)) * sigmoid(rv) / n;
                    }
                }
            }
            self.mlp.backward(&cache, &g, &mut grad);
        }
        Ok((loss, grad))
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: &InverseMetadata) -> Result<()> {
        let header = InverseHeader {
            sizes: self.mlp.sizes().to_vec(),
            components: self.components,
            input_mean: self.input_mean.clone(),
            input_scale: self.input_scale.clone(),
            meta: meta.clone(),
        };
        checkpoint::save(path, CHECKPOINT_KIND, &header, self.mlp.params())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, InverseMetadata)> {
        let (h, payload): (InverseHeader, Vec<f64>) = checkpoint::load(path, CHECKPOINT_KIND)?;
        if h.sizes.last() != Some(&(h.components * COMPONENT_WIDTH)) || h.input_mean.len() != h.sizes[0] {
            return Err(Error::Format("inverse model checkpoint shapes are inconsistent".into()));
        }
        Ok((
            Self {
                mlp: Mlp::from_params(&h.sizes, payload)?,
                components: h.components,
                input_mean: h.input_mean,
                input_scale: h.input_scale,
            },
            h.meta,
        ))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InverseMetadata {
    pub config: Option<InverseConfig>,
    pub backbone: Option<crate::features::BackboneKind>,
    pub loss_trace: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct InverseHeader {
    sizes: Vec<usize>,
    components: usize,
    input_mean: Vec<f64>,
    input_scale: Vec<f64>,
    meta: InverseMetadata,
}

#[derive(Clone, Debug)]
pub struct TrainedInverse {
    pub model: InverseModel,
    pub loss_trace: Vec<f64>,
}

/// Fits the inverse model to `(embedding, pose)` pairs with full-batch Adam.
pub fn train_inverse_model(pairs: &[(Vec<f64>, PoseSE3)], cfg: &InverseConfig) -> Result<TrainedInverse> {
    if pairs.len() < cfg.components.max(1) {
        return Err(Error::invalid(format!(
            "need at least {} training pairs, got {}",
            cfg.components.max(1),
            pairs.len()
        )));
    }
    if cfg.iterations == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::invalid("iterations and learning rate must be positive"));
    }
    let dim = pairs[0].0.len();
    if let Some((e, _)) = pairs.iter().find(|(e, _)| e.len() != dim) {
        return Err(Error::dims(dim, e.len()));
    }
    let mut model = InverseModel::new(dim, cfg, false)?;
    let n = pairs.len() as f64;
    for j in 0..dim {
        let m = pairs.iter().map(|(e, _)| e[j]).sum::<f64>() / n;
        let v = pairs.iter().map(|(e, _)| (e[j] - m).powi(2)).sum::<f64>() / n;
        model.input_mean[j] = m;
        model.input_scale[j] = if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 };
    }
    let data: Vec<(Vec<f64>, [f64; 6])> = pairs
        .iter()
        .map(|(e, p)| Ok((e.clone(), pose_target(p)?)))
        .collect::<Result<_>>()?;
    let mut opt = Adam::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..Default::default()
        },
        model.mlp.num_params(),
    );
    let mut trace = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let (loss, grad) = model.loss_and_gradient(&data)?;
        trace.push(loss);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::TrainingFailure { iteration: it, trace });
        }
        opt.step(model.mlp.params_mut(), &grad);
    }
    Ok(TrainedInverse { model, loss_trace: trace })
}
