//! Experiment protocols: GFF sweeps, language localization and the inversion benchmark.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distill::{train_field, FieldMetadata, SemanticField, TrainingView};
use crate::error::{Error, Result};
use crate::features::{extract_features, pca_project, BackboneKind};
use crate::geometry::{perturb_pose, PoseSE3};
use crate::gff::gff_curve;
use crate::localization::{evaluate_localization, mean_std, QuerySet};
use crate::rng;
use crate::scene::{default_intrinsics, orbit_pose, render, RenderConfig, Scene};
use crate::spine::{
    invert, refine_pose, train_inverse_model, InverseMetadata, InversionStatus, MatchSource, QueryView,
};

use super::config::ExperimentConfig;
use super::report::{fmt_float, write_csv, PlotData, PlotSeries};

/// Camera poses of the four views fields are distilled from.
pub fn distillation_poses() -> Vec<PoseSE3> {
    [0.0, 90.0, 180.0, 270.0]
        .iter()
        .map(|az| orbit_pose(*az, 30.0, 3.5).expect("fixed orbit is valid"))
        .collect()
}

/// Views between the distillation views, used to check generalization.
pub fn held_out_poses() -> Vec<PoseSE3> {
    [45.0, 135.0]
        .iter()
        .map(|az| orbit_pose(*az, 32.0, 3.5).expect("fixed orbit is valid"))
        .collect()
}

/// Distills a field for `kind` from the four standard views.
pub fn distill_field(
    scene: &Scene,
    kind: BackboneKind,
    cfg: &crate::distill::TrainConfig,
    oracle_seed: u64,
) -> Result<crate::distill::TrainedField> {
    let k = default_intrinsics();
    let views = distillation_poses()
        .iter()
        .map(|p| TrainingView::render(scene, &k, p, kind, &cfg.field, oracle_seed))
        .collect::<Result<Vec<_>>>()?;
    train_field(scene, &views, cfg)
}

fn prepare(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Scene> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    cfg.save(out_dir.join("config.resolved.toml"))?;
    let scene = cfg.scene.load()?;
    scene.save_json(out_dir.join("scene.json"))?;
    Ok(scene)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GffSummaryRow {
    pub series: String,
    pub threshold: f64,
    pub mean: f64,
    pub std: f64,
    /// Poses with a defined GFF at this threshold.
    pub valid: usize,
    pub degenerate: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GffPoseRow {
    pub series: String,
    pub pose_id: usize,
    pub threshold: f64,
    pub edges_sem: usize,
    pub edges_rgb: usize,
    pub gff: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GffResults {
    pub summary: Vec<GffSummaryRow>,
    pub per_pose: Vec<GffPoseRow>,
}

impl GffResults {
    pub fn plot_data(&self) -> PlotData {
        let mut series: Vec<PlotSeries> = Vec::new();
        for row in &self.summary {
            if series.last().is_none_or(|s| s.name != row.series) {
                series.push(PlotSeries::new(&row.series));
            }
            series.last_mut().unwrap().push(row.threshold, row.mean, row.std);
        }
        PlotData::new(series)
    }
}

/// GFF of PCA-projected oracle features against RGB, swept over thresholds and
/// aggregated over evaluation poses.
///
/// Writes `gff_summary.csv`, `gff_poses.csv` and `gff_plot.json` into `out_dir`.
pub fn run_gff_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<GffResults> {
    let scene = prepare(cfg, out_dir)?;
    let k = default_intrinsics();
    let poses = cfg.eval_poses()?;
    let mut names: Vec<String> = cfg.backbones.iter().map(|b| b.to_string()).collect();
    if cfg.gff_identity_control {
        names.push("identity-control".into());
    }
    let per_view: Vec<Vec<GffPoseRow>> = poses
        .par_iter()
        .enumerate()
        .map(|(pose_id, pose)| {
            let r = render(&scene, &k, pose, &RenderConfig::default())?;
            let mut rows = Vec::new();
            for name in &names {
                let sem = match name.parse::<BackboneKind>() {
                    Ok(kind) => {
                        let f = extract_features(&r.rgbd, &r.labels, kind, cfg.feature_dim, cfg.oracle_seed)?;
                        pca_project(&f, 3)?.visualization()
                    }
                    Err(_) => r.rgbd.rgb.clone(),
                };
                for v in gff_curve(&sem, &r.rgbd.rgb, &cfg.thresholds)? {
                    rows.push(GffPoseRow {
                        series: name.clone(),
                        pose_id,
                        threshold: v.threshold,
                        edges_sem: v.edges_sem,
                        edges_rgb: v.edges_rgb,
                        gff: v.gff,
                    });
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let mut per_pose: Vec<GffPoseRow> = per_view.into_iter().flatten().collect();
    let order = |s: &str| names.iter().position(|n| n == s).unwrap_or(usize::MAX);
    per_pose.sort_by(|a, b| {
        order(&a.series)
            .cmp(&order(&b.series))
            .then(a.pose_id.cmp(&b.pose_id))
            .then(a.threshold.total_cmp(&b.threshold))
    });
    let mut summary = Vec::new();
    for name in &names {
        for &t in &cfg.thresholds {
            let vals: Vec<&GffPoseRow> = per_pose.iter().filter(|r| &r.series == name && r.threshold == t).collect();
            let finite: Vec<f64> = vals.iter().map(|r| r.gff).filter(|g| g.is_finite()).collect();
            let (mean, std) = mean_std(&finite);
            summary.push(GffSummaryRow {
                series: name.clone(),
                threshold: t,
                mean,
                std,
                valid: finite.len(),
                degenerate: vals.len() - finite.len(),
            });
        }
    }
    let results = GffResults { summary, per_pose };
    write_csv(
        out_dir.join("gff_summary.csv"),
        &["series", "threshold", "mean", "std", "valid", "degenerate"],
        results.summary.iter().map(|r| {
            vec![
                r.series.clone(),
                fmt_float(r.threshold),
                fmt_float(r.mean),
                fmt_float(r.std),
                r.valid.to_string(),
                r.degenerate.to_string(),
            ]
        }),
    )?;
    write_csv(
        out_dir.join("gff_poses.csv"),
        &["series", "pose_id", "threshold", "edges_sem", "edges_rgb", "gff"],
        results.per_pose.iter().map(|r| {
            vec![
                r.series.clone(),
                r.pose_id.to_string(),
                fmt_float(r.threshold),
                r.edges_sem.to_string(),
                r.edges_rgb.to_string(),
                fmt_float(r.gff),
            ]
        }),
    )?;
    results.plot_data().save(out_dir.join("gff_plot.json"))?;
    Ok(results)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationResultRow {
    pub backbone: BackboneKind,
    /// `prototype` for the class's own query, `shuffled` for the control.
    pub query: String,
    pub pose_id: usize,
    pub class: u16,
    pub ssim: f64,
    pub psnr: f64,
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationSummaryRow {
    pub backbone: BackboneKind,
    pub query: String,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Default)]
pub struct LocalizationResults {
    pub rows: Vec<LocalizationResultRow>,
    pub summary: Vec<LocalizationSummaryRow>,
}

/// Relevancy-mask quality of distilled language features per backbone.
///
/// Fields listed in the config are loaded; otherwise one is distilled per
/// backbone and saved as `field-<backbone>.ckpt`. Writes `localization.csv`,
/// `localization_summary.csv` and `localization_plot.json`.
pub fn run_localization_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<LocalizationResults> {
    let scene = prepare(cfg, out_dir)?;
    let k = default_intrinsics();
    let poses = cfg.eval_poses()?;
    let classes = scene.classes();
    let fields = &cfg.localization.fields;
    if !fields.is_empty() && fields.len() != cfg.backbones.len() {
        return Err(Error::dims(format!("{} field checkpoints", cfg.backbones.len()), fields.len()));
    }
    let mut rows = Vec::new();
    for (i, &kind) in cfg.backbones.iter().enumerate() {
        let field = match fields.get(i) {
            Some(p) => SemanticField::load(p)?.0,
            None => {
                let trained = distill_field(&scene, kind, &cfg.distill, cfg.oracle_seed)?;
                let meta = FieldMetadata {
                    backbone: Some(kind),
                    train: Some(cfg.distill.clone()),
                    loss_trace: trained.loss_trace.clone(),
                };
                trained.field.save(out_dir.join(format!("field-{kind}.ckpt")), &meta)?;
                trained.field
            }
        };
        let dim = field.config.language_dim;
        let own: Vec<QuerySet> = classes
            .iter()
            .map(|&c| QuerySet::for_class(c, dim, cfg.oracle_seed))
            .collect::<Result<_>>()?;
        let mut arms = vec![("prototype", own.clone())];
        if cfg.localization.shuffled_control && classes.len() > 1 {
            let shuffled = (0..own.len()).map(|j| own[(j + 1) % own.len()].clone()).collect();
            arms.push(("shuffled", shuffled));
        }
        for (name, queries) in arms {
            for r in evaluate_localization(&field, &scene, &k, &poses, &classes, &queries)? {
                rows.push(LocalizationResultRow {
                    backbone: kind,
                    query: name.into(),
                    pose_id: r.pose_id,
                    class: r.class,
                    ssim: r.ssim,
                    psnr: r.psnr,
                    degenerate: r.degenerate,
                });
            }
        }
    }
    let mut summary = Vec::new();
    for row in &rows {
        if summary
            .iter()
            .any(|s: &LocalizationSummaryRow| s.backbone == row.backbone && s.query == row.query)
        {
            continue;
        }
        let group: Vec<&LocalizationResultRow> =
            rows.iter().filter(|r| r.backbone == row.backbone && r.query == row.query).collect();
        let (ssim_mean, ssim_std) = mean_std(&group.iter().map(|r| r.ssim).collect::<Vec<_>>());
        let (psnr_mean, psnr_std) = mean_std(&group.iter().map(|r| r.psnr).collect::<Vec<_>>());
        summary.push(LocalizationSummaryRow {
            backbone: row.backbone,
            query: row.query.clone(),
            ssim_mean,
            ssim_std,
            psnr_mean,
            psnr_std,
            count: group.len(),
        });
    }
    write_csv(
        out_dir.join("localization.csv"),
        &["backbone", "query", "pose_id", "class", "ssim", "psnr", "degenerate"],
        rows.iter().map(|r| {
            vec![
                r.backbone.to_string(),
                r.query.clone(),
                r.pose_id.to_string(),
                r.class.to_string(),
                fmt_float(r.ssim),
                fmt_float(r.psnr),
                r.degenerate.to_string(),
            ]
        }),
    )?;
    write_csv(
        out_dir.join("localization_summary.csv"),
        &["backbone", "query", "ssim_mean", "ssim_std", "psnr_mean", "psnr_std", "count"],
        summary.iter().map(|s| {
            vec![
                s.backbone.to_string(),
                s.query.clone(),
                fmt_float(s.ssim_mean),
                fmt_float(s.ssim_std),
                fmt_float(s.psnr_mean),
                fmt_float(s.psnr_std),
                s.count.to_string(),
            ]
        }),
    )?;
    let mut series = Vec::new();
    for s in &summary {
        let mut p = PlotSeries::new(format!("{}-{}", s.backbone, s.query));
        for class in &classes {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.backbone == s.backbone && r.query == s.query && r.class == *class)
                .map(|r| r.ssim)
                .collect();
            let (m, sd) = mean_std(&vals);
            p.push(*class as f64, m, sd);
        }
        series.push(p);
    }
    PlotData::new(series).save(out_dir.join("localization_plot.json"))?;
    Ok(LocalizationResults { rows, summary })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub arm: String,
    pub pose_id: usize,
    pub status: InversionStatus,
    /// Error of the starting pose: the coarse estimate for the full pipeline,
    /// the perturbed guess for baselines.
    pub initial_rotation_deg: f64,
    pub initial_translation: f64,
    /// Error of the final estimate (the starting pose when refinement failed).
    pub rotation_deg: f64,
    pub translation: f64,
    pub inliers: usize,
    pub rounds: usize,
    pub success: bool,
    /// Refinement reduced both rotation and translation error.
    pub improved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub count: usize,
    pub rotation_mean: f64,
    pub rotation_std: f64,
    pub rotation_median: f64,
    pub translation_mean: f64,
    pub translation_std: f64,
    pub translation_median: f64,
}

impl ErrorStats {
    fn from_rows(rows: &[&BenchmarkRow]) -> Self {
        let rot: Vec<f64> = rows.iter().map(|r| r.rotation_deg).collect();
        let tr: Vec<f64> = rows.iter().map(|r| r.translation).collect();
        let (rotation_mean, rotation_std) = mean_std(&rot);
        let (translation_mean, translation_std) = mean_std(&tr);
        Self {
            count: rows.len(),
            rotation_mean,
            rotation_std,
            rotation_median: median(&rot),
            translation_mean,
            translation_std,
            translation_median: median(&tr),
        }
    }
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    /// Initial guess error magnitudes; absent for the pipeline without a guess.
    pub init_rotation_deg: Option<f64>,
    pub init_translation: Option<f64>,
    pub queries: usize,
    pub fine_ok: usize,
    pub success_rate: f64,
    /// Fraction of fine-ok queries whose refinement improved both errors.
    pub improved_fraction: f64,
    pub all: ErrorStats,
    pub successful: ErrorStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub version: u32,
    pub success_rotation_deg: f64,
    pub success_translation: f64,
    pub arms: Vec<ArmSummary>,
}

impl BenchmarkSummary {
    pub fn arm(&self, name: &str) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.arm == name)
    }
}

#[derive(Clone, Debug)]
pub struct BenchmarkResults {
    pub rows: Vec<BenchmarkRow>,
    pub summary: BenchmarkSummary,
}

pub const SPINE_ARM: &str = "spine";

/// Pose inversion from no initial guess versus refinement-only baselines started
/// from perturbed ground truth.
///
/// Writes `benchmark.csv`, `benchmark_summary.json`, `benchmark_plot.json` and
/// the trained `inverse.ckpt` into `out_dir`.
pub fn run_inversion_benchmark(cfg: &ExperimentConfig, out_dir: &Path) -> Result<BenchmarkResults> {
    let scene = prepare(cfg, out_dir)?;
    let b = &cfg.benchmark;
    let inv = &b.inversion;
    let k = default_intrinsics();
    let view = |p: &PoseSE3| -> Result<QueryView> {
        let r = render(&scene, &k, p, &inv.render)?;
        QueryView::new(r.rgbd, r.labels, inv)
    };
    let train: Vec<(Vec<f64>, PoseSE3)> = cfg
        .train_poses()?
        .par_iter()
        .map(|p| Ok((view(p)?.embedding(inv), *p)))
        .collect::<Result<_>>()?;
    let trained = train_inverse_model(&train, &b.inverse)?;
    trained.model.save(
        out_dir.join("inverse.ckpt"),
        &InverseMetadata {
            config: Some(b.inverse.clone()),
            backbone: Some(inv.backbone),
            loss_trace: trained.loss_trace.clone(),
        },
    )?;
    let field = match inv.match_source {
        MatchSource::Backbone => None,
        MatchSource::Field => Some(distill_field(&scene, inv.backbone, &cfg.distill, inv.oracle_seed)?.field),
    };

    let success = |r: f64, t: f64| r < b.success_rotation_deg && t < b.success_translation;
    let queries = cfg.query_poses()?;
    let per_query: Vec<Vec<BenchmarkRow>> = queries
        .par_iter()
        .enumerate()
        .map(|(pose_id, truth)| {
            let q = view(truth)?;
            let mut rows = Vec::with_capacity(1 + b.baselines.len());
            let rep = invert(&q, &scene, field.as_ref(), &trained.model, &k, inv, Some(truth))?;
            let (ir, it) = rep
                .coarse
                .as_ref()
                .map_or((f64::NAN, f64::NAN), |c| (c.rotation_error_deg.unwrap(), c.translation_error.unwrap()));
            let (fr, ft) = rep
                .best()
                .map_or((f64::NAN, f64::NAN), |c| (c.rotation_error_deg.unwrap(), c.translation_error.unwrap()));
            rows.push(BenchmarkRow {
                arm: SPINE_ARM.into(),
                pose_id,
                status: rep.status,
                initial_rotation_deg: ir,
                initial_translation: it,
                rotation_deg: fr,
                translation: ft,
                inliers: rep.inliers,
                rounds: rep.rounds,
                success: success(fr, ft),
                improved: rep.status == InversionStatus::FineOk && fr < ir && ft < it,
            });
            for (arm_id, arm) in b.baselines.iter().enumerate() {
                let seed = rng::derive_seed(rng::derive_seed(cfg.seeds.perturbation, arm_id as u64), pose_id as u64);
                let init = perturb_pose(truth, arm.rotation_deg, arm.translation, seed)?;
                let (ir, it) = (init.rotation_error_deg(truth), init.translation_error(truth));
                let row = match refine_pose(&q, &scene, field.as_ref(), &k, &init, inv) {
                    Ok(f) => {
                        let (fr, ft) = (f.pose.rotation_error_deg(truth), f.pose.translation_error(truth));
                        BenchmarkRow {
                            arm: arm.name.clone(),
                            pose_id,
                            status: InversionStatus::FineOk,
                            initial_rotation_deg: ir,
                            initial_translation: it,
                            rotation_deg: fr,
                            translation: ft,
                            inliers: f.inliers,
                            rounds: f.rounds,
                            success: success(fr, ft),
                            improved: fr < ir && ft < it,
                        }
                    }
                    Err(e) if e.is_validation() => return Err(e),
                    Err(_) => BenchmarkRow {
                        arm: arm.name.clone(),
                        pose_id,
                        status: InversionStatus::Failed,
                        initial_rotation_deg: ir,
                        initial_translation: it,
                        rotation_deg: ir,
                        translation: it,
                        inliers: 0,
                        rounds: 0,
                        success: success(ir, it),
                        improved: false,
                    },
                };
                rows.push(row);
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let arm_names: Vec<String> = std::iter::once(SPINE_ARM.to_string())
        .chain(b.baselines.iter().map(|a| a.name.clone()))
        .collect();
    let mut rows: Vec<BenchmarkRow> = per_query.into_iter().flatten().collect();
    let order = |s: &str| arm_names.iter().position(|n| n == s).unwrap_or(usize::MAX);
    rows.sort_by(|a, b| order(&a.arm).cmp(&order(&b.arm)).then(a.pose_id.cmp(&b.pose_id)));

    let arms = arm_names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let mine: Vec<&BenchmarkRow> = rows.iter().filter(|r| &r.arm == name).collect();
            let ok: Vec<&BenchmarkRow> = mine.iter().copied().filter(|r| r.success).collect();
            let fine_ok = mine.iter().filter(|r| r.status == InversionStatus::FineOk).count();
            let improved = mine.iter().filter(|r| r.improved).count();
            let baseline = i.checked_sub(1).map(|j| &b.baselines[j]);
            ArmSummary {
                arm: name.clone(),
                init_rotation_deg: baseline.map(|a| a.rotation_deg),
                init_translation: baseline.map(|a| a.translation),
                queries: mine.len(),
                fine_ok,
                success_rate: ok.len() as f64 / mine.len().max(1) as f64,
                improved_fraction: if fine_ok == 0 { 0.0 } else { improved as f64 / fine_ok as f64 },
                all: ErrorStats::from_rows(&mine),
                successful: ErrorStats::from_rows(&ok),
            }
        })
        .collect();
    let summary = BenchmarkSummary {
        version: super::report::REPORT_VERSION,
        success_rotation_deg: b.success_rotation_deg,
        success_translation: b.success_translation,
        arms,
    };

    write_csv(
        out_dir.join("benchmark.csv"),
        &[
            "arm",
            "pose_id",
            "status",
            "initial_rotation_deg",
            "initial_translation",
            "rotation_deg",
            "translation",
            "inliers",
            "rounds",
            "success",
            "improved",
        ],
        rows.iter().map(|r| {
            vec![
                r.arm.clone(),
                r.pose_id.to_string(),
                r.status.name().into(),
                fmt_float(r.initial_rotation_deg),
                fmt_float(r.initial_translation),
                fmt_float(r.rotation_deg),
                fmt_float(r.translation),
                r.inliers.to_string(),
                r.rounds.to_string(),
                r.success.to_string(),
                r.improved.to_string(),
            ]
        }),
    )?;
    std::fs::write(out_dir.join("benchmark_summary.json"), serde_json::to_string_pretty(&summary)?)?;
    let mut series = Vec::new();
    for name in &arm_names {
        for (metric, f) in [
            ("rotation_deg", (|r: &BenchmarkRow| r.rotation_deg) as fn(&BenchmarkRow) -> f64),
            ("translation", |r: &BenchmarkRow| r.translation),
        ] {
            let mut s = PlotSeries::new(format!("{name}-{metric}"));
            for r in rows.iter().filter(|r| &r.arm == name) {
                s.push(r.pose_id as f64, f(r), 0.0);
            }
            series.push(s);
        }
    }
    PlotData::new(series).save(out_dir.join("benchmark_plot.json"))?;
    Ok(BenchmarkResults { rows, summary })
}
