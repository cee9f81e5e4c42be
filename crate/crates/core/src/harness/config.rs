//! Experiment configuration, stored as a versioned TOML document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::TrainConfig;
use crate::error::{Error, Result};
use crate::features::{BackboneKind, DEFAULT_FEATURE_DIM, DEFAULT_ORACLE_SEED};
use crate::geometry::PoseSE3;
use crate::gff::sweep_thresholds;
use crate::rng;
use crate::scene::{generate_scene, orbit_pose, Scene, SceneSpec, DEFAULT_SCENE_SEED};
use crate::spine::{InverseConfig, InversionConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSource {
    /// Scene JSON to load; when absent the scene is generated from `spec` and `seed`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub seed: u64,
    pub spec: SceneSpec,
}

impl Default for SceneSource {
    fn default() -> Self {
        Self { path: None, seed: DEFAULT_SCENE_SEED, spec: SceneSpec::default() }
    }
}

impl SceneSource {
    pub fn load(&self) -> Result<Scene> {
        match &self.path {
            Some(p) => Scene::load_json(p),
            None => generate_scene(&self.spec, self.seed),
        }
    }
}

/// Ranges evaluation cameras are drawn from; every camera looks at the origin with z up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrbitSampler {
    pub elevation_deg: [f64; 2],
    pub radius: [f64; 2],
}

impl Default for OrbitSampler {
    fn default() -> Self {
        Self { elevation_deg: [20.0, 40.0], radius: [3.3, 3.7] }
    }
}

impl OrbitSampler {
    /// `n` poses with uniform azimuth, elevation and radius.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<PoseSE3>> {
        use rand::Rng;
        let [e0, e1] = self.elevation_deg;
        let [r0, r1] = self.radius;
        if !(e0 <= e1 && r0 <= r1 && r0 > 0.0 && e0 > -90.0 && e1 < 90.0) {
            return Err(Error::invalid(format!("bad orbit ranges {self:?}")));
        }
        let mut g = rng::seeded(seed);
        (0..n)
            .map(|_| {
                let az: f64 = g.random_range(0.0..360.0);
                let el = e0 + (e1 - e0) * g.random::<f64>();
                let r = r0 + (r1 - r0) * g.random::<f64>();
                orbit_pose(az, el, r)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    /// Evaluation poses for the GFF and localization experiments.
    pub eval_poses: u64,
    /// Training poses for the inverse model.
    pub train_poses: u64,
    /// Query poses for the inversion benchmark.
    pub query_poses: u64,
    /// Perturbations applied to initial guesses of the baseline arms.
    pub perturbation: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { eval_poses: 11, train_poses: 1, query_poses: 2, perturbation: 3 }
    }
}

/// Initial guess error of a baseline arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineArm {
    pub name: String,
    pub rotation_deg: f64,
    pub translation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub train_poses: usize,
    pub query_poses: usize,
    pub success_rotation_deg: f64,
    pub success_translation: f64,
    pub baselines: Vec<BaselineArm>,
    pub inverse: InverseConfig,
    pub inversion: InversionConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            train_poses: 32,
            query_poses: 16,
            success_rotation_deg: 5.0,
            success_translation: 0.1,
            baselines: vec![
                BaselineArm { name: "baseline-low".into(), rotation_deg: 30.0, translation: 0.5 },
                BaselineArm { name: "baseline-medium".into(), rotation_deg: 100.0, translation: 1.0 },
            ],
            inverse: InverseConfig::default(),
            inversion: InversionConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizationConfig {
    /// Distilled fields to evaluate, one per backbone in order; trained when empty.
    pub fields: Vec<PathBuf>,
    /// Also score each class against another class's query as a control.
    pub shuffled_control: bool,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        Self { fields: Vec::new(), shuffled_control: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub backbones: Vec<BackboneKind>,
    pub eval_poses: usize,
    /// Channels of the backbone oracle features.
    pub feature_dim: usize,
    pub oracle_seed: u64,
    pub thresholds: Vec<f64>,
    /// Adds a series scoring the RGB image against itself.
    pub gff_identity_control: bool,
    pub scene: SceneSource,
    pub orbit: OrbitSampler,
    pub seeds: Seeds,
    pub distill: TrainConfig,
    pub localization: LocalizationConfig,
    pub benchmark: BenchmarkConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            output_dir: None,
            backbones: BackboneKind::ALL.to_vec(),
            eval_poses: 100,
            feature_dim: DEFAULT_FEATURE_DIM,
            oracle_seed: DEFAULT_ORACLE_SEED,
            thresholds: sweep_thresholds(),
            gff_identity_control: false,
            scene: SceneSource::default(),
            orbit: OrbitSampler::default(),
            seeds: Seeds::default(),
            distill: TrainConfig::default(),
            localization: LocalizationConfig::default(),
            benchmark: BenchmarkConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::invalid(format!("unsupported config version {}", self.version)));
        }
        if self.eval_poses == 0 {
            return Err(Error::invalid("eval_poses must be at least 1"));
        }
        if self.feature_dim < 3 {
            return Err(Error::invalid("feature_dim must be at least 3"));
        }
        if self.backbones.is_empty() {
            return Err(Error::invalid("at least one backbone is required"));
        }
        if self.thresholds.is_empty() || self.thresholds.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("thresholds must be non-empty and strictly increasing"));
        }
        let b = &self.benchmark;
        if b.train_poses == 0 || b.query_poses == 0 {
            return Err(Error::invalid("benchmark pose counts must be at least 1"));
        }
        if !(b.success_rotation_deg > 0.0 && b.success_translation > 0.0) {
            return Err(Error::invalid("success thresholds must be positive"));
        }
        self.distill.validate()?;
        b.inversion.matching.validate()?;
        b.inversion.ransac.validate()?;
        b.inversion.render.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn eval_poses(&self) -> Result<Vec<PoseSE3>> {
        self.orbit.sample(self.eval_poses, self.seeds.eval_poses)
    }

    pub fn train_poses(&self) -> Result<Vec<PoseSE3>> {
        self.orbit.sample(self.benchmark.train_poses, self.seeds.train_poses)
    }

    pub fn query_poses(&self) -> Result<Vec<PoseSE3>> {
        self.orbit.sample(self.benchmark.query_poses, self.seeds.query_poses)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_defaults() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial: ExperimentConfig = toml::from_str("eval_poses = 3\n[benchmark]\nquery_poses = 2\n").unwrap();
        assert_eq!(partial.eval_poses, 3);
        assert_eq!(partial.benchmark.query_poses, 2);
        assert_eq!(partial.benchmark.train_poses, 32);
    }

    #[test]
    fn validation_rejects_zero_poses() {
        let cfg = ExperimentConfig { eval_poses: 0, ..Default::default() };
        assert!(cfg.validate().unwrap_err().is_validation());
    }

    #[test]
    fn orbit_samples_stay_in_range() {
        let poses = OrbitSampler::default().sample(50, 4).unwrap();
        for p in &poses {
            let c = p.center();
            let r = c.norm();
            let el = (c.z / r).asin().to_degrees();
            assert!((3.3..=3.7).contains(&r) && (20.0..=40.0).contains(&el));
        }
        assert_eq!(poses, OrbitSampler::default().sample(50, 4).unwrap());
    }
}
