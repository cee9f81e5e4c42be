//! Matching, robust PnP and the two-stage inversion on the default scene.

use rand::Rng;
use spine::features::extract_features;
use spine::geometry::{perturb_pose, PoseSE3, Vec2, Vec3};
use spine::rng;
use spine::scene::{default_intrinsics, default_scene, orbit_pose, render, Render, RenderConfig};
use spine::spine::{
    coarse_mode, invert, match_features, oracle_correspondences, ransac_pnp, reprojection_error,
    train_inverse_model, InverseConfig, InversionConfig, InversionStatus, QueryView, RansacConfig,
};
use spine::Error;

fn view(pose: &PoseSE3) -> Render {
    render(&default_scene(), &default_intrinsics(), pose, &RenderConfig::default()).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn identical_views_match_every_keypoint_to_itself() {
    let cfg = InversionConfig::default();
    let k = default_intrinsics();
    let pose = orbit_pose(30.0, 30.0, 3.5).unwrap();
    let r = view(&pose);
    let f = extract_features(&r.rgbd, &r.labels, cfg.backbone, cfg.feature_dim, cfg.oracle_seed).unwrap();
    let corr = match_features(&r.rgbd, &f, &r.rgbd, &f, &k, &pose, &cfg.matching).unwrap();
    assert!(corr.len() >= 30, "{} matches", corr.len());
    let worst = corr.iter().map(|c| reprojection_error(&k, &pose, c)).fold(0.0, f64::max);
    assert!(worst < 1e-6, "worst residual {worst}");
}

#[test]
fn noiseless_oracle_correspondences_fit_the_true_pose() {
    let cfg = InversionConfig::default();
    let k = default_intrinsics();
    let pose = orbit_pose(200.0, 25.0, 3.4).unwrap();
    let r = view(&pose);
    let f = extract_features(&r.rgbd, &r.labels, cfg.backbone, cfg.feature_dim, cfg.oracle_seed).unwrap();
    let corr = oracle_correspondences(&r.rgbd, &f, &k, &pose, &cfg.matching, 0.0, 1).unwrap();
    assert!(!corr.is_empty());
    assert!(corr.iter().all(|c| reprojection_error(&k, &pose, c) < 1e-9));
}

#[test]
fn small_pose_offset_still_gives_accurate_matches() {
    let cfg = InversionConfig::default();
    let k = default_intrinsics();
    let truth = orbit_pose(140.0, 30.0, 3.5).unwrap();
    let offset = perturb_pose(&truth, 5.0, 0.0, 9).unwrap();
    let q = view(&truth);
    let r = view(&offset);
    let fq = extract_features(&q.rgbd, &q.labels, cfg.backbone, cfg.feature_dim, cfg.oracle_seed).unwrap();
    let fr = extract_features(&r.rgbd, &r.labels, cfg.backbone, cfg.feature_dim, cfg.oracle_seed).unwrap();
    let corr = match_features(&q.rgbd, &fq, &r.rgbd, &fr, &k, &offset, &cfg.matching).unwrap();
    assert!(corr.len() >= 30, "{} matches", corr.len());
    let m = median(corr.iter().map(|c| reprojection_error(&k, &truth, c)).collect());
    assert!(m < 1.5, "median residual {m} px");
}

#[test]
fn overwhelming_outliers_are_not_accepted_silently() {
    let k = default_intrinsics();
    let truth = orbit_pose(80.0, 30.0, 3.5).unwrap();
    let mut g = rng::seeded(4);
    let corr: Vec<_> = (0..200)
        .map(|i| {
            let point = Vec3::new(g.random_range(-1.0..1.0), g.random_range(-1.0..1.0), g.random_range(-1.0..1.0));
            let pixel = if i % 20 == 0 {
                spine::geometry::project(&k, &truth, &point).unwrap().pixel
            } else {
                Vec2::new(g.random_range(0.0..96.0), g.random_range(0.0..96.0))
            };
            spine::spine::Correspondence { pixel, point, score: 1.0 }
        })
        .collect();
    let init = perturb_pose(&truth, 10.0, 0.2, 5).unwrap();
    match ransac_pnp(&corr, &k, &RansacConfig::default(), &init) {
        Err(e) => assert!(matches!(e, Error::RansacFailure { .. }), "{e}"),
        Ok(r) => assert!(
            r.pose.rotation_error_deg(&truth) > 0.5 || r.pose.translation_error(&truth) > 0.02,
            "95% outliers unexpectedly solved"
        ),
    }
}

fn toy_poses() -> Vec<PoseSE3> {
    (0..8).map(|i| orbit_pose(45.0 * i as f64 + 10.0, 25.0 + 5.0 * (i % 3) as f64, 3.5).unwrap()).collect()
}

#[test]
fn inverse_model_fits_a_toy_pose_set_and_inversion_refines_it() {
    let cfg = InversionConfig::default();
    let k = default_intrinsics();
    let scene = default_scene();
    let poses = toy_poses();
    let queries: Vec<QueryView> = poses
        .iter()
        .map(|p| {
            let r = view(p);
            QueryView::new(r.rgbd, r.labels, &cfg).unwrap()
        })
        .collect();
    let pairs: Vec<_> = queries.iter().zip(&poses).map(|(q, p)| (q.embedding(&cfg), *p)).collect();
    let icfg = InverseConfig { hidden: 64, iterations: 3000, ..Default::default() };
    let trained = train_inverse_model(&pairs, &icfg).unwrap();
    let close = pairs
        .iter()
        .filter(|(e, p)| {
            let mode = coarse_mode(&trained.model.predict(e).unwrap()).unwrap();
            mode.rotation_error_deg(p) < 15.0 && mode.translation_error(p) < 0.3
        })
        .count();
    assert!(close >= 6, "{close}/8 modes close to their pose");

    let report = invert(&queries[0], &scene, None, &trained.model, &k, &cfg, Some(&poses[0])).unwrap();
    assert_eq!(report.status, InversionStatus::FineOk, "{:?}", report.message);
    assert!(report.coarse.is_some());
    let fine = report.fine.as_ref().unwrap();
    assert!(fine.rotation_error_deg.unwrap() < 0.1, "{fine:?}");
    assert!(fine.translation_error.unwrap() < 0.005, "{fine:?}");

    // Looking away from the scene leaves nothing to match.
    let eye = poses[0].center();
    let away = PoseSE3::look_at(&eye, &(eye * 2.0), &Vec3::z()).unwrap();
    let r = view(&away);
    assert_eq!(r.rgbd.foreground_count(), 0);
    let empty = QueryView::new(r.rgbd, r.labels, &cfg).unwrap();
    let report = invert(&empty, &scene, None, &trained.model, &k, &cfg, None).unwrap();
    assert_eq!(report.status, InversionStatus::CoarseOnly);
    assert!(report.coarse.is_some() && report.fine.is_none());
    assert!(report.message.is_some());
}
