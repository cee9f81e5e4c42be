//! Dataset manifests and experiment outputs.

use std::path::Path;

use spine::distill::TrainConfig;
use spine::features::BackboneKind;
use spine::geometry::{project, Vec3};
use spine::harness::manifest::flip_yz;
use spine::harness::{
    load_manifest, run_gff_experiment, run_localization_experiment, save_manifest, ExperimentConfig, PlotData,
};
use spine::scene::{default_intrinsics, orbit_pose};
use spine::spine::pose_rows;
use spine::Error;

fn write_manifest(dir: &Path, convention: &str, transforms: &[[[f64; 4]; 4]]) -> std::path::PathBuf {
    let k = default_intrinsics();
    let frames: Vec<serde_json::Value> = transforms
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let image = format!("frame{i}.png");
            std::fs::write(dir.join(&image), b"").unwrap();
            serde_json::json!({ "image": image, "transform": t, "intrinsics": k })
        })
        .collect();
    let path = dir.join("manifest.json");
    let doc = serde_json::json!({ "version": 1, "convention": convention, "frames": frames });
    std::fs::write(&path, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    path
}

#[test]
fn minimal_manifest_loads_one_pose() {
    let dir = tempfile::tempdir().unwrap();
    let pose = orbit_pose(10.0, 20.0, 3.0).unwrap();
    let m = load_manifest(write_manifest(dir.path(), "opencv", &[pose_rows(&pose)])).unwrap();
    assert_eq!(m.frames.len(), 1);
    assert!(m.frames[0].pose.is_valid());
    assert!(m.frames[0].pose.rotation_error_deg(&pose) < 1e-9);
    assert_eq!(m.frames[0].image, dir.path().join("frame0.png"));
}

#[test]
fn opengl_manifest_is_converted_to_opencv_axes() {
    let dir = tempfile::tempdir().unwrap();
    let pose = orbit_pose(50.0, 35.0, 3.5).unwrap();
    let raw = flip_yz(&pose.to_matrix());
    let rows = std::array::from_fn(|i| std::array::from_fn(|j| raw[(i, j)]));
    let m = load_manifest(write_manifest(dir.path(), "opengl-y-up", &[rows])).unwrap();
    let loaded = m.frames[0].pose.to_matrix();
    for i in 0..3 {
        assert!((loaded[(i, 0)] - raw[(i, 0)]).abs() < 1e-12);
        assert!((loaded[(i, 1)] + raw[(i, 1)]).abs() < 1e-12);
        assert!((loaded[(i, 2)] + raw[(i, 2)]).abs() < 1e-12);
        assert!((loaded[(i, 3)] - raw[(i, 3)]).abs() < 1e-12);
    }
    // A point in front of the camera lands on the same pixel as with the original pose.
    let k = default_intrinsics();
    let q = Vec3::new(0.2, -0.1, 0.3);
    let a = project(&k, &pose, &q).unwrap();
    let b = project(&k, &m.frames[0].pose, &q).unwrap();
    assert!((a.pixel - b.pixel).norm() < 1e-9);
    assert!(k.contains(&b.pixel));
}

#[test]
fn reflection_is_rejected_with_the_frame_index() {
    let dir = tempfile::tempdir().unwrap();
    let good = pose_rows(&orbit_pose(0.0, 30.0, 3.0).unwrap());
    let mut bad = good;
    for row in bad.iter_mut().take(3) {
        row[0] = -row[0];
    }
    let err = load_manifest(write_manifest(dir.path(), "opencv", &[good, bad])).unwrap_err();
    assert!(matches!(err, Error::Parse { .. }));
    assert!(err.is_validation());
    assert!(err.to_string().contains("frames[1]"), "{err}");
}

#[test]
fn missing_image_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_manifest(dir.path(), "opencv", &[pose_rows(&orbit_pose(0.0, 30.0, 3.0).unwrap())]);
    std::fs::remove_file(dir.path().join("frame0.png")).unwrap();
    let err = load_manifest(&path).unwrap_err();
    assert!(err.to_string().contains("frames[0].image"), "{err}");
}

#[test]
fn manifest_round_trip_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let poses: Vec<_> = [0.0, 120.0, 240.0]
        .iter()
        .map(|az| pose_rows(&orbit_pose(*az, 25.0, 3.2).unwrap()))
        .collect();
    let first = load_manifest(write_manifest(dir.path(), "opencv", &poses)).unwrap();
    let again = dir.path().join("again.json");
    save_manifest(&first, &again).unwrap();
    assert_eq!(load_manifest(&again).unwrap(), first);
}

#[test]
fn gff_experiment_writes_one_row_per_series_and_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { eval_poses: 3, gff_identity_control: true, ..Default::default() };
    let res = run_gff_experiment(&cfg, dir.path()).unwrap();
    let thresholds = cfg.thresholds.len();
    assert_eq!(res.summary.len(), 3 * thresholds);
    assert_eq!(res.per_pose.len(), 3 * 3 * thresholds);
    assert!(res.summary.iter().filter(|r| r.series == "identity-control").all(|r| r.mean == 1.0));
    let csv = std::fs::read_to_string(dir.path().join("gff_summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * thresholds);
    // plot values equal the summary values
    let plot = PlotData::load(dir.path().join("gff_plot.json")).unwrap();
    assert_eq!(plot.series.iter().map(|s| s.name.as_str()).collect::<Vec<_>>(), ["visual", "geom", "identity-control"]);
    let means: Vec<f64> = plot.series.iter().flat_map(|s| s.y.clone()).collect();
    assert_eq!(means, res.summary.iter().map(|r| r.mean).collect::<Vec<_>>());
    for s in &plot.series {
        assert!(s.x.iter().any(|&t| (t - 0.1).abs() < 1e-12) && s.x.iter().any(|&t| (t - 0.3).abs() < 1e-12));
    }
}

#[test]
fn prototype_queries_localize_better_than_shuffled_queries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        eval_poses: 3,
        backbones: vec![BackboneKind::VisualGeometry],
        distill: TrainConfig { iterations: 600, ..Default::default() },
        ..Default::default()
    };
    let res = run_localization_experiment(&cfg, dir.path()).unwrap();
    let classes = cfg.scene.load().unwrap().classes().len();
    assert_eq!(res.rows.len(), 2 * 3 * classes);
    let mean = |q: &str| res.summary.iter().find(|s| s.query == q).unwrap().ssim_mean;
    assert!(mean("prototype") > mean("shuffled"), "{} vs {}", mean("prototype"), mean("shuffled"));
    assert!(dir.path().join("field-geom.ckpt").is_file());
    let csv = std::fs::read_to_string(dir.path().join("localization.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "backbone,query,pose_id,class,ssim,psnr,degenerate");
}
