//! `spine` command-line front end.
//!
//! Relative output paths are resolved against `$SPINE_OUTPUT_ROOT` when set.
//! Exit codes: 0 success, 2 invalid input, 3 failed computation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use spine::distill::{train_field, FieldMetadata, SemanticField, TrainConfig, TrainingView};
use spine::features::{extract_features, language_features, pca_project, BackboneKind, DEFAULT_FEATURE_DIM, DEFAULT_ORACLE_SEED};
use spine::geometry::CameraIntrinsics;
use spine::harness::{
    load_view, resolve_output, run_gff_experiment, run_inversion_benchmark, run_localization_experiment, save_view,
    ExperimentConfig, OrbitSampler, ViewPaths,
};
use spine::rng::derive_seed;
use spine::scene::{generate_scene, orbit_pose, render, RenderConfig, Scene, SceneSpec, DEFAULT_SCENE_SEED};
use spine::spine::{
    invert, train_inverse_model, InverseConfig, InverseMetadata, InverseModel, InversionConfig, InversionStatus,
    MatchSource, QueryView,
};

#[derive(Parser)]
#[command(name = "spine", version, about = "Semantic distillation and two-stage pose inversion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural Gaussian scene.
    GenScene(GenSceneArgs),
    /// Render posed RGB-D views with class labels.
    Render(RenderArgs),
    /// Run a backbone oracle on a stored view.
    Extract(ExtractArgs),
    /// Distill oracle features of stored views into a semantic field.
    Distill(DistillArgs),
    /// Train the coarse pose regressor on rendered views.
    TrainInverse(TrainInverseArgs),
    /// GFF-versus-threshold experiment.
    Gff(ExperimentArgs),
    /// Relevancy localization experiment.
    Localize(ExperimentArgs),
    /// Estimate the pose of a query view.
    Invert(InvertArgs),
    /// Inversion benchmark against perturbed-initialization baselines.
    Bench(ExperimentArgs),
}

#[derive(Args)]
struct GenSceneArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SCENE_SEED)]
    seed: u64,
    #[arg(long)]
    primitives: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Directory receiving `<name>-NNN.*` view files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "view")]
    name: String,
    /// Number of orbit poses to sample when no explicit pose is given.
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Seed of the orbit pose sampler.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, requires_all = ["elevation", "radius"])]
    azimuth: Option<f64>,
    #[arg(long)]
    elevation: Option<f64>,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long, default_value_t = 96)]
    size: usize,
    #[arg(long, default_value_t = 100.0)]
    focal: f64,
}

#[derive(Args)]
struct ExtractArgs {
    /// RGB image of a stored view; sibling depth, label and camera files are read too.
    #[arg(long)]
    view: PathBuf,
    #[arg(long, default_value = "visual")]
    backbone: BackboneKind,
    #[arg(long)]
    out: PathBuf,
    /// Optional 3-component PCA visualization.
    #[arg(long)]
    pca: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_FEATURE_DIM)]
    dim: usize,
    /// Oracle seed.
    #[arg(long, default_value_t = DEFAULT_ORACLE_SEED)]
    seed: u64,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Directory of stored views (every `*.png` that is not a label image).
    #[arg(long)]
    views: PathBuf,
    #[arg(long, default_value = "visual")]
    backbone: BackboneKind,
    #[arg(long)]
    iters: Option<usize>,
    /// Training seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_ORACLE_SEED)]
    oracle_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainInverseArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value_t = 32)]
    poses: usize,
    #[arg(long, default_value = "visual")]
    backbone: BackboneKind,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    components: Option<usize>,
    /// Seeds both the training-pose sampler and the model initialization.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_ORACLE_SEED)]
    oracle_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    /// TOML experiment configuration; defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; falls back to the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces every seed of the configuration with one derived from this value.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct InvertArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Distilled field; required for `--match-source field`.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    inv_model: PathBuf,
    /// RGB image of a stored query view.
    #[arg(long)]
    query: PathBuf,
    /// RANSAC seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "backbone")]
    match_source: String,
    #[arg(long)]
    report: PathBuf,
}

enum Failure {
    Validation(String),
    Experiment(String),
}

impl From<spine::Error> for Failure {
    fn from(e: spine::Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Experiment(e.to_string())
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Validation(msg.into())
}

/// Missing inputs are a usage error, not a failed computation.
fn require_file(path: &Path) -> CliResult {
    if path.exists() {
        Ok(())
    } else {
        Err(invalid(format!("{}: no such file or directory", path.display())))
    }
}

fn output_file(path: &Path) -> CliResult<PathBuf> {
    let p = resolve_output(path);
    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(spine::Error::from)?;
    }
    Ok(p)
}

fn load_scene(path: &Path) -> CliResult<Scene> {
    require_file(path)?;
    Ok(Scene::load_json(path)?)
}

fn gen_scene(a: GenSceneArgs) -> CliResult {
    let mut spec = SceneSpec::default();
    spec.primitives = a.primitives.unwrap_or(spec.primitives);
    spec.classes = a.classes.unwrap_or(spec.classes);
    let scene = generate_scene(&spec, a.seed)?;
    let out = output_file(&a.out)?;
    scene.save_json(&out)?;
    println!("wrote {} ({} primitives)", out.display(), scene.primitives().len());
    Ok(())
}

fn render_views(a: RenderArgs) -> CliResult {
    let scene = load_scene(&a.scene)?;
    if a.size == 0 || !(a.focal > 0.0) {
        return Err(invalid("image size and focal length must be positive"));
    }
    let k = CameraIntrinsics::centered(a.size, a.focal);
    let poses = match (a.azimuth, a.elevation, a.radius) {
        (Some(az), Some(el), Some(r)) => vec![orbit_pose(az, el, r)?],
        _ => OrbitSampler::default().sample(a.count, a.seed)?,
    };
    let dir = resolve_output(&a.out);
    for (i, pose) in poses.iter().enumerate() {
        let r = render(&scene, &k, pose, &RenderConfig::default())?;
        let paths = save_view(dir.join(format!("{}-{i:03}", a.name)), &r.rgbd, &r.labels, &k, Some(pose))?;
        println!("wrote {}", paths.rgb.display());
    }
    Ok(())
}

fn extract(a: ExtractArgs) -> CliResult {
    require_file(&a.view)?;
    let view = load_view(&ViewPaths::from_rgb(&a.view)?)?;
    let f = extract_features(&view.rgbd, &view.labels, a.backbone, a.dim, a.seed)?;
    let out = output_file(&a.out)?;
    f.save(&out)?;
    println!("wrote {} ({}x{}x{})", out.display(), f.width(), f.height(), f.dim());
    if let Some(p) = a.pca {
        let p = output_file(&p)?;
        pca_project(&f, 3)?.visualization().save_png(&p)?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn stored_views(dir: &Path) -> CliResult<Vec<ViewPaths>> {
    let entries = std::fs::read_dir(dir).map_err(|e| invalid(format!("{}: {e}", dir.display())))?;
    let mut pngs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.ends_with(".png") && !name.ends_with(".labels.png")
        })
        .collect();
    pngs.sort();
    pngs.iter().map(|p| Ok(ViewPaths::from_rgb(p)?)).collect()
}

fn distill(a: DistillArgs) -> CliResult {
    let scene = load_scene(&a.scene)?;
    let mut cfg = TrainConfig { seed: a.seed, ..Default::default() };
    cfg.iterations = a.iters.unwrap_or(cfg.iterations);
    let mut views = Vec::new();
    for paths in stored_views(&a.views)? {
        let v = load_view(&paths)?;
        let pose = v.pose.ok_or_else(|| invalid(format!("{} has no pose", paths.camera.display())))?;
        views.push(TrainingView {
            intrinsics: v.intrinsics,
            pose,
            gt_s: extract_features(&v.rgbd, &v.labels, a.backbone, cfg.field.spatial_dim, a.oracle_seed)?,
            gt_l: language_features(&v.labels, cfg.field.language_dim, a.oracle_seed)?,
            rgbd: v.rgbd,
        });
    }
    let trained = train_field(&scene, &views, &cfg)?;
    let out = output_file(&a.out)?;
    trained.field.save(
        &out,
        &FieldMetadata { backbone: Some(a.backbone), train: Some(cfg), loss_trace: trained.loss_trace },
    )?;
    println!(
        "wrote {} (loss {:.6} -> {:.6} over {} views)",
        out.display(),
        trained.initial_loss,
        trained.final_loss,
        views.len()
    );
    Ok(())
}

fn train_inverse(a: TrainInverseArgs) -> CliResult {
    let scene = load_scene(&a.scene)?;
    let inv = InversionConfig { backbone: a.backbone, oracle_seed: a.oracle_seed, ..Default::default() };
    let mut cfg = InverseConfig { seed: a.seed, ..Default::default() };
    cfg.iterations = a.iters.unwrap_or(cfg.iterations);
    cfg.components = a.components.unwrap_or(cfg.components);
    let k = spine::scene::default_intrinsics();
    let mut pairs = Vec::with_capacity(a.poses);
    for pose in OrbitSampler::default().sample(a.poses, a.seed)? {
        let r = render(&scene, &k, &pose, &inv.render)?;
        pairs.push((QueryView::new(r.rgbd, r.labels, &inv)?.embedding(&inv), pose));
    }
    let trained = train_inverse_model(&pairs, &cfg)?;
    let out = output_file(&a.out)?;
    let final_loss = trained.loss_trace.last().copied().unwrap_or(f64::NAN);
    trained.model.save(
        &out,
        &InverseMetadata { config: Some(cfg), backbone: Some(a.backbone), loss_trace: trained.loss_trace },
    )?;
    println!("wrote {} (final loss {final_loss:.6})", out.display());
    Ok(())
}

fn experiment_config(a: &ExperimentArgs) -> CliResult<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &a.config {
        Some(p) => {
            require_file(p)?;
            ExperimentConfig::load(p)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seeds.eval_poses = derive_seed(s, 0);
        cfg.seeds.train_poses = derive_seed(s, 1);
        cfg.seeds.query_poses = derive_seed(s, 2);
        cfg.seeds.perturbation = derive_seed(s, 3);
        cfg.distill.seed = derive_seed(s, 4);
        cfg.benchmark.inverse.seed = derive_seed(s, 5);
        cfg.benchmark.inversion.ransac.seed = derive_seed(s, 6);
    }
    cfg.validate()?;
    let out = a
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| invalid("no output directory: pass --out or set output_dir in the config"))?;
    let out = resolve_output(out);
    std::fs::create_dir_all(&out).map_err(spine::Error::from)?;
    Ok((cfg, out))
}

fn gff(a: ExperimentArgs) -> CliResult {
    let (cfg, out) = experiment_config(&a)?;
    let res = run_gff_experiment(&cfg, &out)?;
    for r in res.summary.iter().filter(|r| cfg.thresholds.len() == 1 || r.threshold == cfg.thresholds[0]) {
        println!("{} tau={:.2} gff={:.4}+-{:.4}", r.series, r.threshold, r.mean, r.std);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn localize(a: ExperimentArgs) -> CliResult {
    let (cfg, out) = experiment_config(&a)?;
    let res = run_localization_experiment(&cfg, &out)?;
    println!("{} rows; wrote {}", res.rows.len(), out.display());
    Ok(())
}

fn bench(a: ExperimentArgs) -> CliResult {
    let (cfg, out) = experiment_config(&a)?;
    let res = run_inversion_benchmark(&cfg, &out)?;
    for arm in &res.summary.arms {
        println!(
            "{}: success {:.3}, fine-ok {}/{}, improved {:.3}",
            arm.arm, arm.success_rate, arm.fine_ok, arm.queries, arm.improved_fraction
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn invert_query(a: InvertArgs) -> CliResult {
    let scene = load_scene(&a.scene)?;
    require_file(&a.inv_model)?;
    require_file(&a.query)?;
    let (model, meta) = InverseModel::load(&a.inv_model)?;
    let match_source = match a.match_source.as_str() {
        "backbone" => MatchSource::Backbone,
        "field" => MatchSource::Field,
        other => return Err(invalid(format!("unknown match source {other:?} (expected backbone or field)"))),
    };
    let field = match &a.ckpt {
        Some(p) => {
            require_file(p)?;
            Some(SemanticField::load(p)?.0)
        }
        None if match_source == MatchSource::Field => return Err(invalid("--match-source field requires --ckpt")),
        None => None,
    };
    let mut cfg = InversionConfig { match_source, ..Default::default() };
    cfg.backbone = meta.backbone.unwrap_or(cfg.backbone);
    cfg.ransac.seed = a.seed;
    let view = load_view(&ViewPaths::from_rgb(&a.query)?)?;
    let query = QueryView::new(view.rgbd, view.labels, &cfg)?;
    let report = invert(&query, &scene, field.as_ref(), &model, &view.intrinsics, &cfg, view.pose.as_ref())?;
    let out = output_file(&a.report)?;
    std::fs::write(&out, serde_json::to_string_pretty(&report).map_err(spine::Error::from)?).map_err(spine::Error::from)?;
    println!("status {}; wrote {}", report.status.name(), out.display());
    if report.status == InversionStatus::Failed {
        return Err(Failure::Experiment(report.message.unwrap_or_else(|| "inversion failed".into())));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenScene(a) => gen_scene(a),
        Command::Render(a) => render_views(a),
        Command::Extract(a) => extract(a),
        Command::Distill(a) => distill(a),
        Command::TrainInverse(a) => train_inverse(a),
        Command::Gff(a) => gff(a),
        Command::Localize(a) => localize(a),
        Command::Invert(a) => invert_query(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Experiment(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
