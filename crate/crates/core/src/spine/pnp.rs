//! Levenberg-Marquardt pose refinement from 2D-3D correspondences.

use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{exp_so3_matrix, skew, CameraIntrinsics, Mat3, PoseSE3, Vec3};

use super::matching::{Correspondence, MIN_SAMPLE};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PnpConfig {
    pub max_iterations: usize,
    /// Stop when the update norm drops below this.
    pub step_tolerance: f64,
    pub initial_damping: f64,
}

impl Default for PnpConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            step_tolerance: 1e-10,
            initial_damping: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PnpResult {
    pub pose: PoseSE3,
    /// Total squared reprojection error after each accepted step, starting at the initial cost.
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl PnpResult {
    pub fn cost(&self) -> f64 {
        *self.cost_trace.last().unwrap_or(&f64::INFINITY)
    }
}

/// Reprojection residual `π(K(Rq + t)) - p` under world-to-camera `(r, t)`.
fn residual(k: &CameraIntrinsics, r: &Mat3, t: &Vec3, c: &Correspondence) -> Option<(f64, f64, Vec3)> {
    let xc = r * c.point + t;
    if !(xc.z > 1e-9) {
        return None;
    }
    let u = k.fx * xc.x / xc.z + k.cx - c.pixel.x;
    let v = k.fy * xc.y / xc.z + k.cy - c.pixel.y;
    Some((u, v, xc))
}

fn total_cost(k: &CameraIntrinsics, r: &Mat3, t: &Vec3, corr: &[Correspondence]) -> f64 {
    let mut cost = 0.0;
    for c in corr {
        match residual(k, r, t, c) {
            Some((u, v, _)) => cost += u * u + v * v,
            None => return f64::INFINITY,
        }
    }
    cost
}

/// Pixel distance between `p` and the projection of `q` under `pose`; infinite behind the camera.
pub fn reprojection_error(k: &CameraIntrinsics, pose: &PoseSE3, c: &Correspondence) -> f64 {
    let (r, t) = pose.extrinsics();
    residual(k, &r, &t, c).map_or(f64::INFINITY, |(u, v, _)| u.hypot(v))
}

/// Minimizes total squared reprojection error starting from `init`.
///
/// The world-to-camera rotation is updated as `R <- exp(δω) R` and the translation additively.
pub fn solve_pnp(corr: &[Correspondence], k: &CameraIntrinsics, init: &PoseSE3, cfg: &PnpConfig) -> Result<PnpResult> {
    if corr.len() < MIN_SAMPLE {
        return Err(Error::InsufficientMatches { found: corr.len(), required: MIN_SAMPLE });
    }
    if corr.iter().any(|c| !c.point.iter().all(|v| v.is_finite()) || !c.pixel.iter().all(|v| v.is_finite())) {
        return Err(Error::invalid("correspondences must be finite"));
    }
    let (mut r, mut t) = init.extrinsics();
    let mut cost = total_cost(k, &r, &t, corr);
    if !cost.is_finite() {
        return Err(Error::DegenerateConfiguration(
            "initial pose places correspondences behind the camera".into(),
        ));
    }
    let mut trace = vec![cost];
    let mut lambda = cfg.initial_damping;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for c in corr {
            let (u, v, xc) = residual(k, &r, &t, c).expect("cost is finite");
            let iz = 1.0 / xc.z;
            let dpi = nalgebra::Matrix2x3::new(
                k.fx * iz, 0.0, -k.fx * xc.x * iz * iz,
                0.0, k.fy * iz, -k.fy * xc.y * iz * iz,
            );
            let rq = r * c.point;
            let mut dx = nalgebra::Matrix3x6::<f64>::zeros();
            dx.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&rq)));
            dx.fixed_view_mut::<3, 3>(0, 3).copy_from(&Mat3::identity());
            let j = dpi * dx;
            let res = nalgebra::Vector2::new(u, v);
            jtj += j.transpose() * j;
            jtr += j.transpose() * res;
        }
        if !jtj.iter().all(|v| v.is_finite()) {
            return Err(Error::DegenerateConfiguration("non-finite normal equations".into()));
        }
        let eig = jtj.symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        if !(hi > 0.0) || lo <= hi * 1e-14 {
            return Err(Error::DegenerateConfiguration("singular normal equations".into()));
        }
        let mut accepted = false;
        let mut step_norm = 0.0;
        for _ in 0..30 {
            let mut a = jtj;
            for i in 0..6 {
                a[(i, i)] += lambda * jtj[(i, i)];
            }
            let Some(chol) = a.cholesky() else {
                return Err(Error::DegenerateConfiguration("singular normal equations".into()));
            };
            let delta = -chol.solve(&jtr);
            step_norm = delta.norm();
            let omega = Vec3::new(delta[0], delta[1], delta[2]);
            let r_new = exp_so3_matrix(&omega) * r;
            let t_new = t + Vec3::new(delta[3], delta[4], delta[5]);
            let c_new = total_cost(k, &r_new, &t_new, corr);
            if c_new <= cost {
                r = r_new;
                t = t_new;
                cost = c_new;
                trace.push(cost);
                lambda = (lambda * 0.1).max(1e-12);
                accepted = true;
                break;
            }
            lambda *= 10.0;
            if step_norm < cfg.step_tolerance {
                break;
            }
        }
        if !accepted || step_norm < cfg.step_tolerance {
            converged = true;
            break;
        }
    }
    let rot = crate::geometry::Rotation::from_matrix(orthonormalize(&r))?;
    let pose = PoseSE3::from_extrinsics(rot.matrix(), &t);
    Ok(PnpResult { pose, cost_trace: trace, iterations, converged })
}

/// Nearest rotation matrix, removing drift accumulated by repeated products.
fn orthonormalize(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * vt;
    }
    r
}
