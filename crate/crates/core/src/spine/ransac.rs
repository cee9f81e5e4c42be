//! Robust PnP: minimal-sample hypotheses scored by inlier count.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, PoseSE3};
use crate::rng;

use super::matching::{Correspondence, MIN_SAMPLE};
use super::pnp::{reprojection_error, solve_pnp, PnpConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    /// Reprojection error, in pixels, below which a correspondence is an inlier.
    pub inlier_threshold: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    pub min_sample: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            inlier_threshold: 2.0,
            max_iterations: 1000,
            confidence: 0.99,
            min_sample: MIN_SAMPLE,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inlier_threshold > 0.0) {
            return Err(Error::invalid("inlier threshold must be > 0"));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("ransac needs at least one iteration"));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::invalid("confidence must be in (0, 1)"));
        }
        if self.min_sample < MIN_SAMPLE {
            return Err(Error::invalid(format!("min sample must be at least {MIN_SAMPLE}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RansacResult {
    pub pose: PoseSE3,
    /// Indices into the input correspondences, ascending.
    pub inliers: Vec<usize>,
    pub hypotheses: usize,
}

/// Hypotheses needed to draw one all-inlier sample with probability `confidence`.
pub fn required_iterations(inlier_ratio: f64, sample: usize, confidence: f64) -> f64 {
    let good = inlier_ratio.powi(sample as i32);
    if good >= 1.0 {
        return 0.0;
    }
    if good <= 0.0 {
        return f64::INFINITY;
    }
    (1.0 - confidence).ln() / (1.0 - good).ln()
}

struct Hypothesis {
    index: usize,
    pose: PoseSE3,
    inliers: Vec<usize>,
    residual: f64,
}

fn score(corr: &[Correspondence], k: &CameraIntrinsics, pose: &PoseSE3, threshold: f64) -> (Vec<usize>, f64) {
    let mut inliers = Vec::new();
    let mut residual = 0.0;
    for (i, c) in corr.iter().enumerate() {
        let e = reprojection_error(k, pose, c);
        if e < threshold {
            inliers.push(i);
            residual += e * e;
        }
    }
    (inliers, residual)
}

/// Total order on hypotheses: more inliers, then lower residual, then lower index.
fn better(a: &Hypothesis, b: &Hypothesis) -> bool {
    a.inliers
        .len()
        .cmp(&b.inliers.len())
        .then(b.residual.total_cmp(&a.residual))
        .then(b.index.cmp(&a.index))
        .is_gt()
}

fn hypothesis(corr: &[Correspondence], k: &CameraIntrinsics, init: &PoseSE3, cfg: &RansacConfig, i: usize) -> Option<Hypothesis> {
    let mut g = rng::seeded(rng::derive_seed(cfg.seed, i as u64));
    let sample: Vec<Correspondence> = index::sample(&mut g, corr.len(), cfg.min_sample)
        .into_iter()
        .map(|j| corr[j])
        .collect();
    let fit = solve_pnp(&sample, k, init, &PnpConfig::default()).ok()?;
    let (inliers, residual) = score(corr, k, &fit.pose, cfg.inlier_threshold);
    Some(Hypothesis { index: i, pose: fit.pose, inliers, residual })
}

/// Robust pose from correspondences that may contain outliers.
///
/// Hypotheses are evaluated in parallel batches; each uses its own seed derived
/// from `cfg.seed` and its index, so the result does not depend on scheduling.
pub fn ransac_pnp(corr: &[Correspondence], k: &CameraIntrinsics, cfg: &RansacConfig, init: &PoseSE3) -> Result<RansacResult> {
    cfg.validate()?;
    if corr.len() < cfg.min_sample {
        return Err(Error::InsufficientMatches { found: corr.len(), required: cfg.min_sample });
    }
    const BATCH: usize = 16;
    let mut best: Option<Hypothesis> = None;
    let mut done = 0;
    let mut needed = cfg.max_iterations as f64;
    while done < cfg.max_iterations && (done as f64) < needed {
        let end = (done + BATCH).min(cfg.max_iterations);
        let batch: Vec<Option<Hypothesis>> = (done..end)
            .into_par_iter()
            .map(|i| hypothesis(corr, k, init, cfg, i))
            .collect();
        for h in batch.into_iter().flatten() {
            if best.as_ref().is_none_or(|b| better(&h, b)) {
                best = Some(h);
            }
        }
        done = end;
        if let Some(b) = &best {
            let w = b.inliers.len() as f64 / corr.len() as f64;
            needed = needed.min(required_iterations(w, cfg.min_sample, cfg.confidence));
        }
    }
    let best_inliers = best.as_ref().map_or(0, |b| b.inliers.len());
    let Some(best) = best.filter(|b| b.inliers.len() >= cfg.min_sample) else {
        return Err(Error::RansacFailure { best_inliers, required: cfg.min_sample });
    };
    let subset: Vec<Correspondence> = best.inliers.iter().map(|&i| corr[i]).collect();
    let (pose, inliers) = match solve_pnp(&subset, k, &best.pose, &PnpConfig::default()) {
        Ok(fit) => {
            let (inl, _) = score(corr, k, &fit.pose, cfg.inlier_threshold);
            if inl.len() >= cfg.min_sample {
                (fit.pose, inl)
            } else {
                (best.pose, best.inliers)
            }
        }
        Err(_) => (best.pose, best.inliers),
    };
    Ok(RansacResult { pose, inliers, hypotheses: done })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{perturb_pose, Vec2};
    use crate::spine::pnp::tests::synthetic;
    use rand::Rng;

    #[test]
    fn iteration_formula() {
        assert_eq!(required_iterations(1.0, 6, 0.99), 0.0);
        assert!(required_iterations(0.0, 6, 0.99).is_infinite());
        let n = required_iterations(0.5, 6, 0.99);
        assert!((n - (0.01f64).ln() / (1.0 - 0.5f64.powi(6)).ln()).abs() < 1e-12);
    }

    #[test]
    fn clean_data_keeps_everything() {
        let (k, pose, corr) = synthetic(11, 40);
        let init = perturb_pose(&pose, 10.0, 0.2, 1).unwrap();
        let res = ransac_pnp(&corr, &k, &RansacConfig::default(), &init).unwrap();
        assert_eq!(res.inliers, (0..40).collect::<Vec<_>>());
        assert!(res.pose.rotation_error_deg(&pose) < 1e-6);
    }

    #[test]
    fn outliers_are_rejected_deterministically() {
        let (k, pose, mut corr) = synthetic(12, 100);
        let mut g = rng::seeded(99);
        for c in corr.iter_mut().take(30) {
            c.pixel = Vec2::new(g.random_range(0.0..96.0), g.random_range(0.0..96.0));
        }
        let init = perturb_pose(&pose, 10.0, 0.2, 2).unwrap();
        let cfg = RansacConfig { seed: 5, ..Default::default() };
        let a = ransac_pnp(&corr, &k, &cfg, &init).unwrap();
        let b = ransac_pnp(&corr, &k, &cfg, &init).unwrap();
        assert_eq!(a.inliers, b.inliers);
        assert_eq!(a.pose, b.pose);
        assert!(a.pose.rotation_error_deg(&pose) < 1e-6);
        assert!(a.inliers.iter().all(|&i| reprojection_error(&k, &a.pose, &corr[i]) < 2.0));
        assert!(a.inliers.iter().filter(|&&i| i >= 30).count() == 70);
    }
}
