//! Full inversion: coarse regression, then render, match and RANSAC-PnP rounds.

use serde::{Deserialize, Serialize};

use crate::distill::{render_semantic_image, SemanticField};
use crate::error::{Error, Result};
use crate::features::{
    extract_features, global_embedding, BackboneKind, FeatureImage, DEFAULT_EMBEDDING_DIM, DEFAULT_FEATURE_DIM,
    DEFAULT_ORACLE_SEED,
};
use crate::geometry::{CameraIntrinsics, PoseSE3};
use crate::image::LabelImage;
use crate::rng;
use crate::scene::{render, RGBDImage, RenderConfig, Scene};

use super::inverse::{coarse_mode, InverseModel};
use super::matching::{match_features, MatchConfig};
use super::ransac::{ransac_pnp, RansacConfig};

pub const REPORT_VERSION: u32 = 1;

/// Where features of the re-rendered view come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchSource {
    /// Backbone oracle applied to the rendered RGB-D image.
    #[default]
    Backbone,
    /// Spatial head of the distilled field at back-projected rendered depth.
    Field,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionConfig {
    pub backbone: BackboneKind,
    pub feature_dim: usize,
    pub embedding_dim: usize,
    pub oracle_seed: u64,
    pub match_source: MatchSource,
    pub max_rounds: usize,
    /// Refinement stops once a round moves the pose less than both of these.
    pub stop_rotation_deg: f64,
    pub stop_translation: f64,
    pub matching: MatchConfig,
    pub ransac: RansacConfig,
    pub render: RenderConfig,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::VisualGeometry,
            feature_dim: DEFAULT_FEATURE_DIM,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            oracle_seed: DEFAULT_ORACLE_SEED,
            match_source: MatchSource::Backbone,
            max_rounds: 3,
            stop_rotation_deg: 0.01,
            stop_translation: 1e-3,
            matching: MatchConfig::default(),
            ransac: RansacConfig::default(),
            render: RenderConfig::default(),
        }
    }
}

/// A query image with the oracle features computed once.
#[derive(Clone, Debug)]
pub struct QueryView {
    pub rgbd: RGBDImage,
    pub labels: LabelImage,
    pub features: FeatureImage,
}

impl QueryView {
    pub fn new(rgbd: RGBDImage, labels: LabelImage, cfg: &InversionConfig) -> Result<Self> {
        let features = extract_features(&rgbd, &labels, cfg.backbone, cfg.feature_dim, cfg.oracle_seed)?;
        Ok(Self { rgbd, labels, features })
    }

    pub fn embedding(&self, cfg: &InversionConfig) -> Vec<f64> {
        global_embedding(&self.features, cfg.backbone, cfg.embedding_dim)
    }
}

#[derive(Clone, Debug)]
pub struct FineResult {
    pub pose: PoseSE3,
    pub inliers: usize,
    pub matches: usize,
    pub rounds: usize,
}

/// Render-match-solve rounds starting at `init`.
pub fn refine_pose(
    query: &QueryView,
    scene: &Scene,
    field: Option<&SemanticField>,
    k: &CameraIntrinsics,
    init: &PoseSE3,
    cfg: &InversionConfig,
) -> Result<FineResult> {
    if cfg.max_rounds == 0 {
        return Err(Error::invalid("max_rounds must be at least 1"));
    }
    let mut pose = *init;
    let mut last: Option<FineResult> = None;
    for round in 0..cfg.max_rounds {
        let view = render(scene, k, &pose, &cfg.render)?;
        let rendered = match cfg.match_source {
            MatchSource::Backbone => {
                extract_features(&view.rgbd, &view.labels, cfg.backbone, cfg.feature_dim, cfg.oracle_seed)?
            }
            MatchSource::Field => {
                let f = field.ok_or_else(|| Error::invalid("field match source needs a distilled field"))?;
                render_semantic_image(f, scene, k, &pose, &cfg.render)?.0
            }
        };
        let step = match_features(&query.rgbd, &query.features, &view.rgbd, &rendered, k, &pose, &cfg.matching)
            .and_then(|corr| {
                let rc = RansacConfig { seed: rng::derive_seed(cfg.ransac.seed, round as u64), ..cfg.ransac };
                ransac_pnp(&corr, k, &rc, &pose).map(|r| (r, corr.len()))
            });
        let (res, matches) = match step {
            Ok(v) => v,
            // keep the last successful round
            Err(e) => return last.ok_or(e),
        };
        let moved_r = res.pose.rotation_error_deg(&pose);
        let moved_t = res.pose.translation_error(&pose);
        pose = res.pose;
        last = Some(FineResult { pose, inliers: res.inliers.len(), matches, rounds: round + 1 });
        if moved_r < cfg.stop_rotation_deg && moved_t < cfg.stop_translation {
            break;
        }
    }
    Ok(last.expect("at least one round ran"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InversionStatus {
    FineOk,
    CoarseOnly,
    Failed,
}

impl InversionStatus {
    pub fn name(self) -> &'static str {
        match self {
            InversionStatus::FineOk => "fine-ok",
            InversionStatus::CoarseOnly => "coarse-only",
            InversionStatus::Failed => "failed",
        }
    }
}

/// Row-major 4x4 camera-to-world matrix, the form poses take in reports.
pub fn pose_rows(pose: &PoseSE3) -> [[f64; 4]; 4] {
    let m = pose.to_matrix();
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate {
    pub camera_to_world: [[f64; 4]; 4],
    pub rotation_error_deg: Option<f64>,
    pub translation_error: Option<f64>,
}

impl PoseEstimate {
    fn new(pose: &PoseSE3, truth: Option<&PoseSE3>) -> Self {
        Self {
            camera_to_world: pose_rows(pose),
            rotation_error_deg: truth.map(|t| pose.rotation_error_deg(t)),
            translation_error: truth.map(|t| pose.translation_error(t)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionReport {
    pub version: u32,
    pub status: InversionStatus,
    pub coarse: Option<PoseEstimate>,
    pub fine: Option<PoseEstimate>,
    pub matches: usize,
    pub inliers: usize,
    pub rounds: usize,
    pub message: Option<String>,
}

impl InversionReport {
    /// Fine estimate if present, else coarse.
    pub fn best(&self) -> Option<&PoseEstimate> {
        self.fine.as_ref().or(self.coarse.as_ref())
    }
}

/// Estimates the query's pose without any initial guess.
///
/// Matching failures degrade to a coarse-only report rather than an error;
/// `truth`, when given, fills in the error fields.
pub fn invert(
    query: &QueryView,
    scene: &Scene,
    field: Option<&SemanticField>,
    model: &InverseModel,
    k: &CameraIntrinsics,
    cfg: &InversionConfig,
    truth: Option<&PoseSE3>,
) -> Result<InversionReport> {
    let mut report = InversionReport {
        version: REPORT_VERSION,
        status: InversionStatus::Failed,
        coarse: None,
        fine: None,
        matches: 0,
        inliers: 0,
        rounds: 0,
        message: None,
    };
    let dist = model.predict(&query.embedding(cfg))?;
    let coarse = match coarse_mode(&dist) {
        Ok(p) if p.is_valid() => p,
        Ok(_) => {
            report.message = Some("coarse pose is not a valid rigid transform".into());
            return Ok(report);
        }
        Err(e) => {
            report.message = Some(e.to_string());
            return Ok(report);
        }
    };
    report.coarse = Some(PoseEstimate::new(&coarse, truth));
    match refine_pose(query, scene, field, k, &coarse, cfg) {
        Ok(fine) => {
            report.status = InversionStatus::FineOk;
            report.fine = Some(PoseEstimate::new(&fine.pose, truth));
            report.matches = fine.matches;
            report.inliers = fine.inliers;
            report.rounds = fine.rounds;
        }
        Err(e @ (Error::InsufficientMatches { .. }
        | Error::RansacFailure { .. }
        | Error::DegenerateConfiguration(_)
        | Error::BehindCamera { .. })) => {
            report.status = InversionStatus::CoarseOnly;
            report.message = Some(e.to_string());
        }
        Err(e) if e.is_validation() => return Err(e),
        Err(e) => report.message = Some(e.to_string()),
    }
    Ok(report)
}
