//! Rotations, rigid poses, pinhole projection and pose-error metrics.
//!
//! Poses are stored camera-to-world: `rotation` maps camera axes into the
//! world frame and `translation` is the camera center in world coordinates.
//! The camera frame is OpenCV-style (+z forward, +x right, +y down).
//! Projection uses the world-to-camera extrinsics `(R, t)` derived from the
//! pose, so that a world point `x` lands at camera coordinates `R x + t`.

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat4 = Matrix4<f64>;

/// Below this angle the exponential map uses the first-order expansion.
const SMALL_ANGLE: f64 = 1e-8;
/// Tolerance for accepting a matrix as a rotation.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

/// A 3x3 rotation matrix (orthonormal, determinant +1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rotation(Mat3);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Mat3::identity())
    }

    /// Validates orthonormality and orientation within [`ROTATION_TOLERANCE`].
    pub fn from_matrix(m: Mat3) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("rotation matrix has non-finite entries"));
        }
        let ortho = (m.transpose() * m - Mat3::identity()).abs().max();
        let det = m.determinant();
        if ortho > ROTATION_TOLERANCE || (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::invalid(format!(
                "not a rotation: |RᵀR - I|max = {ortho:.3e}, det = {det:.6}"
            )));
        }
        Ok(Rotation(m))
    }

    /// Wraps a matrix the caller guarantees is a rotation.
    pub(crate) fn from_matrix_unchecked(m: Mat3) -> Self {
        Rotation(m)
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Rotation(self.0 * other.0)
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    pub fn angle(&self) -> f64 {
        rotation_angle(&self.0)
    }
}

/// Rotation vector: axis scaled by angle in radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisAngle(pub Vec3);

impl AxisAngle {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        AxisAngle(Vec3::new(x, y, z))
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        AxisAngle(axis.normalize() * angle)
    }

    pub fn vector(&self) -> &Vec3 {
        &self.0
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }

    /// Wraps the angle into `[0, π]` by flipping the axis when needed.
    pub fn canonical(&self) -> Self {
        let theta = self.0.norm();
        if theta == 0.0 || !theta.is_finite() {
            return *self;
        }
        let axis = self.0 / theta;
        let mut wrapped = theta.rem_euclid(2.0 * std::f64::consts::PI);
        let mut axis = axis;
        if wrapped > std::f64::consts::PI {
            wrapped = 2.0 * std::f64::consts::PI - wrapped;
            axis = -axis;
        }
        AxisAngle(axis * wrapped)
    }

    /// The other rotation vector describing the same rotation, pointing the
    /// opposite way with angle `2π - θ`.
    pub fn antipode(&self) -> Self {
        let theta = self.0.norm();
        if theta == 0.0 {
            return *self;
        }
        AxisAngle(self.0 - self.0 / theta * (2.0 * std::f64::consts::PI))
    }
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)])
}

/// Exponential map so(3) → SO(3) (Rodrigues).
pub fn exp_so3(r: &AxisAngle) -> Result<Rotation> {
    let v = r.0;
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::invalid("exp_so3: non-finite rotation vector"));
    }
    Ok(Rotation(exp_so3_matrix(&v)))
}

pub(crate) fn exp_so3_matrix(v: &Vec3) -> Mat3 {
    let theta = v.norm();
    let k = skew(v);
    if theta < SMALL_ANGLE {
        return Mat3::identity() + k;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Mat3::identity() + k * a + k * k * b
}

/// Logarithm SO(3) → so(3), returning the canonical vector with angle in `[0, π]`.
///
/// Near θ = π the axis comes from the symmetric part `(R + Rᵀ)/2 - cos θ I = (1 - cos θ) a aᵀ`,
/// pivoting on its largest diagonal entry; the sign follows the skew part,
/// or the pivot component is made positive when the skew part vanishes.
pub fn log_so3(rot: &Rotation) -> Result<AxisAngle> {
    let m = Rotation::from_matrix(rot.0)?.0;
    let w = vee(&m);
    let sin2 = w.norm(); // 2 sin θ
    let cos = 0.5 * (m.trace() - 1.0);
    let theta = sin2.atan2(2.0 * cos);
    if theta < SMALL_ANGLE {
        return Ok(AxisAngle(w * 0.5));
    }
    if theta < 2.0 {
        return Ok(AxisAngle(w * (theta / sin2)));
    }
    let sym = (m + m.transpose()) * 0.5 - Mat3::identity() * theta.cos();
    let outer = sym / (1.0 - theta.cos());
    let k = (0..3)
        .max_by(|&i, &j| outer[(i, i)].total_cmp(&outer[(j, j)]))
        .unwrap();
    let ak = outer[(k, k)].max(0.0).sqrt();
    let mut axis = Vec3::zeros();
    for i in 0..3 {
        axis[i] = if i == k { ak } else { outer[(i, k)] / ak };
    }
    axis.normalize_mut();
    let sign_ref = axis.dot(&w);
    if sign_ref < 0.0 || (sign_ref == 0.0 && axis[k] < 0.0) {
        axis = -axis;
    }
    Ok(AxisAngle(axis * theta))
}

/// Angle of a rotation matrix, accurate over the full `[0, π]` range.
fn rotation_angle(m: &Mat3) -> f64 {
    let sin2 = vee(m).norm();
    let cos2 = (m.trace() - 1.0).clamp(-2.0, 2.0);
    sin2.atan2(cos2)
}

/// Smallest angle (degrees, in `[0, 180]`) aligning two orientations.
///
/// Equal to `arccos((tr(R_estᵀ R_gt) - 1) / 2)` with the argument clamped;
/// evaluated through `atan2` so it stays accurate near 0° and 180°.
pub fn rotation_error_deg(r_est: &Rotation, r_gt: &Rotation) -> f64 {
    let delta = r_est.0.transpose() * r_gt.0;
    let deg = rotation_angle(&delta).to_degrees();
    if deg.is_nan() {
        // only reachable with non-finite input
        let c = ((delta.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        return c.acos().to_degrees();
    }
    deg
}

pub fn translation_error(t_est: &Vec3, t_gt: &Vec3) -> f64 {
    (t_est - t_gt).norm()
}

/// Pinhole intrinsics in pixels. Pixel `(u, v)` has its center at integer coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square image with the principal point at the center.
    pub fn centered(size: usize, focal: f64) -> Self {
        let c = (size as f64 - 1.0) * 0.5;
        Self {
            fx: focal,
            fy: focal,
            cx: c,
            cy: c,
            width: size,
            height: size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && self.cx >= 0.0
            && self.cy >= 0.0
            && self.cx < self.width as f64
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid intrinsics {self:?}")))
        }
    }

    pub fn matrix(&self) -> Mat3 {
        Mat3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Intrinsics for an image `factor` times larger, such that a `factor`×`factor`
    /// block of output pixels covers exactly one pixel of `self`.
    pub fn upscaled(&self, factor: usize) -> Self {
        let f = factor as f64;
        let shift = (f - 1.0) * 0.5;
        Self {
            fx: self.fx * f,
            fy: self.fy * f,
            cx: self.cx * f + shift,
            cy: self.cy * f + shift,
            width: self.width * factor,
            height: self.height * factor,
        }
    }

    pub fn contains(&self, pixel: &Vec2) -> bool {
        pixel.x >= -0.5
            && pixel.y >= -0.5
            && pixel.x < self.width as f64 - 0.5
            && pixel.y < self.height as f64 - 0.5
    }

    /// Camera-frame direction with unit z through a pixel.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// Rigid camera pose, stored camera-to-world.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseSE3 {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl PoseSE3 {
    pub fn new(rotation: Rotation, translation: Vec3) -> Result<Self> {
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("pose translation must be finite"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Rotation::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        self.translation
    }

    /// World-to-camera `(R, t)` such that `x_cam = R x + t`.
    pub fn extrinsics(&self) -> (Mat3, Vec3) {
        let r = self.rotation.0.transpose();
        let t = -(r * self.translation);
        (r, t)
    }

    pub fn from_extrinsics(r: &Mat3, t: &Vec3) -> Self {
        let rot = r.transpose();
        Self {
            rotation: Rotation(rot),
            translation: -(rot * t),
        }
    }

    /// Camera at `eye` looking at `target`, with `up` pointing roughly upward in the image.
    pub fn look_at(eye: &Vec3, target: &Vec3, up: &Vec3) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::invalid("look_at: eye and target coincide"));
        }
        let forward = forward.normalize();
        let right = forward.cross(up);
        if right.norm() < 1e-9 {
            return Err(Error::invalid("look_at: up is parallel to the view direction"));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rot = Mat3::from_columns(&[right, down, forward]);
        Ok(Self {
            rotation: Rotation(rot),
            translation: *eye,
        })
    }

    /// 4x4 homogeneous camera-to-world matrix.
    pub fn to_matrix(&self) -> Mat4 {
        let mut m = Mat4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation.0);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &Mat4) -> Result<Self> {
        let bottom = m.fixed_view::<1, 4>(3, 0);
        if (bottom[0].abs() + bottom[1].abs() + bottom[2].abs() + (bottom[3] - 1.0).abs()) > 1e-9 {
            return Err(Error::invalid("transform bottom row must be [0, 0, 0, 1]"));
        }
        let rot = Rotation::from_matrix(m.fixed_view::<3, 3>(0, 0).into_owned())?;
        Self::new(rot, m.fixed_view::<3, 1>(0, 3).into_owned())
    }

    pub fn rotation_error_deg(&self, gt: &PoseSE3) -> f64 {
        rotation_error_deg(&self.rotation, &gt.rotation)
    }

    pub fn translation_error(&self, gt: &PoseSE3) -> f64 {
        translation_error(&self.translation, &gt.translation)
    }

    pub fn is_valid(&self) -> bool {
        Rotation::from_matrix(self.rotation.0).is_ok()
            && self.translation.iter().all(|v| v.is_finite())
    }
}

/// Pixel coordinates and camera-frame depth of a projected point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub pixel: Vec2,
    pub depth: f64,
}

pub fn project(k: &CameraIntrinsics, pose: &PoseSE3, x: &Vec3) -> Result<Projection> {
    let (r, t) = pose.extrinsics();
    project_camera(k, &(r * x + t))
}

pub(crate) fn project_camera(k: &CameraIntrinsics, xc: &Vec3) -> Result<Projection> {
    if !(xc.z > 1e-9) {
        return Err(Error::BehindCamera { depth: xc.z });
    }
    Ok(Projection {
        pixel: Vec2::new(k.fx * xc.x / xc.z + k.cx, k.fy * xc.y / xc.z + k.cy),
        depth: xc.z,
    })
}

/// Lifts a pixel at camera-frame depth `depth` back to world coordinates.
pub fn backproject(k: &CameraIntrinsics, pose: &PoseSE3, pixel: &Vec2, depth: f64) -> Result<Vec3> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::invalid(format!("backproject: depth must be > 0, got {depth}")));
    }
    let xc = k.ray_direction(pixel.x, pixel.y) * depth;
    Ok(pose.rotation.0 * xc + pose.translation)
}

/// Unit vector uniformly distributed on the sphere.
pub fn random_unit_vector(rng: &mut rng::Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Rotation drawn uniformly from SO(3).
pub fn random_rotation(rng: &mut rng::Rng) -> Rotation {
    // uniform unit quaternion
    let q = nalgebra::Vector4::<f64>::from_fn(|_, _| rng.sample(StandardNormal)).normalize();
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Rotation(Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - z * w),
        2.0 * (x * z + y * w),
        2.0 * (x * y + z * w),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - x * w),
        2.0 * (x * z - y * w),
        2.0 * (y * z + x * w),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// Offsets a pose by a rotation of exactly `rot_err_deg` about a random axis and a
/// camera-center displacement of exactly `trans_err` in a random direction.
pub fn perturb_pose(pose: &PoseSE3, rot_err_deg: f64, trans_err: f64, seed: u64) -> Result<PoseSE3> {
    if !(0.0..=180.0).contains(&rot_err_deg) {
        return Err(Error::invalid(format!(
            "rotation error must be in [0, 180] degrees, got {rot_err_deg}"
        )));
    }
    if !(trans_err >= 0.0) {
        return Err(Error::invalid(format!(
            "translation error must be >= 0, got {trans_err}"
        )));
    }
    let mut rng = rng::seeded(seed);
    let axis = random_unit_vector(&mut rng);
    let dir = random_unit_vector(&mut rng);
    let delta = exp_so3_matrix(&(axis * rot_err_deg.to_radians()));
    Ok(PoseSE3 {
        rotation: Rotation(pose.rotation.0 * delta),
        translation: pose.translation + dir * trans_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn close(a: &Mat3, b: &Mat3, tol: f64) -> bool {
        (a - b).abs().max() < tol
    }

    #[test]
    fn exp_identity_and_quarter_turn() {
        let r = exp_so3(&AxisAngle::new(0.0, 0.0, 0.0)).unwrap();
        assert_eq!(*r.matrix(), Mat3::identity());

        let r = exp_so3(&AxisAngle::new(0.0, 0.0, FRAC_PI_2)).unwrap();
        let m = r.matrix();
        assert!((m[(0, 0)]).abs() < 1e-15);
        assert!((m[(0, 1)] + 1.0).abs() < 1e-15);
        assert!((m[(0, 2)]).abs() < 1e-15);
    }

    #[test]
    fn exp_rejects_non_finite() {
        assert!(exp_so3(&AxisAngle::new(f64::NAN, 0.0, 0.0)).is_err());
        assert!(exp_so3(&AxisAngle::new(0.0, f64::INFINITY, 0.0)).is_err());
    }

    #[test]
    fn exp_small_angle_branch() {
        let v = Vec3::new(1e-10, -2e-10, 3e-10);
        let r = exp_so3(&AxisAngle(v)).unwrap();
        assert!(close(r.matrix(), &(Mat3::identity() + skew(&v)), 1e-20));
    }

    #[test]
    fn log_identity_and_half_turn() {
        let r = log_so3(&Rotation::identity()).unwrap();
        assert_eq!(r.0, Vec3::zeros());

        let half = Rotation::from_matrix(Mat3::from_diagonal(&Vec3::new(1.0, -1.0, -1.0))).unwrap();
        let r = log_so3(&half).unwrap();
        assert!((r.0 - Vec3::new(PI, 0.0, 0.0)).norm() < 1e-12);

        // exp(π x̂) carries ~1e-16 skew residue; log must still land on +π x̂
        let r = log_so3(&exp_so3(&AxisAngle::new(PI, 0.0, 0.0)).unwrap()).unwrap();
        assert!((r.0 - Vec3::new(PI, 0.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn log_half_turn_matches_quaternion_axis() {
        // 180° about a generic axis: quaternion (0, a) gives R = 2 a aᵀ - I
        let a = Vec3::new(0.3, -0.5, 0.8).normalize();
        let m = a * a.transpose() * 2.0 - Mat3::identity();
        let r = log_so3(&Rotation::from_matrix(m).unwrap()).unwrap();
        assert!((r.angle() - PI).abs() < 1e-12);
        // largest |component| of a is z, pivot component positive
        assert!((r.0 - a * PI).norm() < 1e-12);
    }

    #[test]
    fn log_rejects_non_rotations() {
        let bad = Rotation(Mat3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0)));
        assert!(log_so3(&bad).is_err());
        let skewed = Rotation(Mat3::identity() * 1.001);
        assert!(log_so3(&skewed).is_err());
    }

    #[test]
    fn exp_log_round_trip_seeded() {
        let mut rng = rng::seeded(7);
        for _ in 0..1000 {
            let axis = random_unit_vector(&mut rng);
            let theta = rng.random_range(0.0..(PI - 1e-3));
            let r = AxisAngle(axis * theta);
            let back = log_so3(&exp_so3(&r).unwrap()).unwrap();
            assert!((back.0 - r.0).norm() < 1e-9, "{:?} -> {:?}", r, back);
        }
    }

    #[test]
    fn canonical_wraps_long_vectors() {
        let r = AxisAngle::new(0.0, 0.0, 1.5 * PI).canonical();
        assert!((r.0 - Vec3::new(0.0, 0.0, -0.5 * PI)).norm() < 1e-12);
        let r = AxisAngle::new(3.0 * PI + 0.25, 0.0, 0.0).canonical();
        assert!((r.0 - Vec3::new(-(PI - 0.25), 0.0, 0.0)).norm() < 1e-12);
        let a = AxisAngle::new(0.0, 2.5, 0.0);
        let ra = exp_so3(&a).unwrap();
        let rb = exp_so3(&a.antipode()).unwrap();
        assert!(close(ra.matrix(), rb.matrix(), 1e-12));
    }

    #[test]
    fn rotation_error_cases() {
        let mut rng = rng::seeded(3);
        let gt = random_rotation(&mut rng);
        assert!(rotation_error_deg(&gt, &gt) < 1e-6);

        let flip = Rotation::from_matrix(Mat3::from_diagonal(&Vec3::new(-1.0, -1.0, 1.0))).unwrap();
        assert_eq!(rotation_error_deg(&Rotation::identity(), &flip), 180.0);
        let e = rotation_error_deg(&gt.compose(&flip), &gt);
        assert!((e - 180.0).abs() < 1e-9);

        let axis = random_unit_vector(&mut rng);
        let thirty = exp_so3(&AxisAngle(axis * 30f64.to_radians())).unwrap();
        let e = rotation_error_deg(&gt.compose(&thirty), &gt);
        assert!((e - 30.0).abs() < 1e-6);
    }

    #[test]
    fn rotation_error_never_nan_when_trace_overshoots() {
        // trace slightly above 3
        let m = Rotation(Mat3::identity() * (1.0 + 1e-12));
        let e = rotation_error_deg(&m, &Rotation::identity());
        assert!(e.is_finite());
        assert!(e < 1e-3);
    }

    #[test]
    fn translation_error_cases() {
        let z = Vec3::zeros();
        assert_eq!(translation_error(&z, &z), 0.0);
        assert_eq!(translation_error(&Vec3::new(1.0, 0.0, 0.0), &z), 1.0);
        assert_eq!(translation_error(&Vec3::new(1.0, 2.0, 2.0), &z), 3.0);
    }

    #[test]
    fn project_on_axis_and_offset() {
        let k = CameraIntrinsics::new(100.0, 120.0, 31.5, 23.5, 64, 48).unwrap();
        let pose = PoseSE3::identity();
        let p = project(&k, &pose, &Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(p.pixel, Vec2::new(k.cx, k.cy));
        assert_eq!(p.depth, 1.0);

        let z = 2.0;
        let p = project(&k, &pose, &Vec3::new(z / k.fx, 0.0, z)).unwrap();
        assert!((p.pixel - Vec2::new(k.cx + 1.0, k.cy)).norm() < 1e-12);

        assert!(matches!(
            project(&k, &pose, &Vec3::new(0.0, 0.0, -1.0)),
            Err(Error::BehindCamera { .. })
        ));
    }

    #[test]
    fn backproject_round_trips() {
        let k = CameraIntrinsics::new(100.0, 90.0, 32.0, 24.0, 64, 48).unwrap();
        let mut rng = rng::seeded(11);
        let pose = PoseSE3::new(random_rotation(&mut rng), Vec3::new(0.3, -1.0, 2.0)).unwrap();

        let center = Vec2::new(k.cx, k.cy);
        let x = backproject(&k, &pose, &center, 2.5).unwrap();
        assert!((x - (pose.rotation.apply(&Vec3::new(0.0, 0.0, 2.5)) + pose.translation)).norm() < 1e-12);

        let corner = Vec2::new(0.0, 47.0);
        let x = backproject(&k, &pose, &corner, 4.0).unwrap();
        let p = project(&k, &pose, &x).unwrap();
        assert!((p.pixel - corner).norm() < 1e-9);
        assert!((p.depth - 4.0).abs() < 1e-9);

        for _ in 0..200 {
            let px = Vec2::new(rng.random_range(0.0..64.0), rng.random_range(0.0..48.0));
            let d = rng.random_range(0.1..20.0);
            let x = backproject(&k, &pose, &px, d).unwrap();
            let p = project(&k, &pose, &x).unwrap();
            assert!((p.pixel - px).norm() < 1e-9);
        }

        assert!(backproject(&k, &pose, &center, 0.0).is_err());
        assert!(backproject(&k, &pose, &center, -1.0).is_err());
    }

    #[test]
    fn perturbation_magnitudes_are_exact() {
        let mut rng = rng::seeded(5);
        let pose = PoseSE3::new(random_rotation(&mut rng), Vec3::new(1.0, 2.0, 3.0)).unwrap();
        let same = perturb_pose(&pose, 0.0, 0.0, 9).unwrap();
        assert_eq!(same, pose);
        for (deg, t) in [(30.0, 0.5), (100.0, 1.0)] {
            for seed in 0..20 {
                let p = perturb_pose(&pose, deg, t, seed).unwrap();
                assert!((p.rotation_error_deg(&pose) - deg).abs() < 1e-6);
                assert!((p.translation_error(&pose) - t).abs() < 1e-9);
            }
        }
        assert_eq!(
            perturb_pose(&pose, 30.0, 0.5, 4).unwrap(),
            perturb_pose(&pose, 30.0, 0.5, 4).unwrap()
        );
        assert!(perturb_pose(&pose, 181.0, 0.0, 0).is_err());
        assert!(perturb_pose(&pose, 10.0, -0.1, 0).is_err());
    }

    #[test]
    fn look_at_is_opencv_convention() {
        let eye = Vec3::new(-3.0, 0.0, 0.0);
        let pose = PoseSE3::look_at(&eye, &Vec3::zeros(), &Vec3::z()).unwrap();
        let k = CameraIntrinsics::centered(65, 50.0);
        // a point above the target appears above the image center (smaller v)
        let p = project(&k, &pose, &Vec3::new(0.0, 0.0, 0.5)).unwrap();
        assert!(p.pixel.y < k.cy);
        assert!((p.pixel.x - k.cx).abs() < 1e-12);
        // world +y is to the left when looking along +x with z up
        let p = project(&k, &pose, &Vec3::new(0.0, 0.5, 0.0)).unwrap();
        assert!(p.pixel.x < k.cx);
        assert!(pose.is_valid());
    }

    #[test]
    fn matrix_round_trip() {
        let mut rng = rng::seeded(2);
        let pose = PoseSE3::new(random_rotation(&mut rng), Vec3::new(0.1, 0.2, 0.3)).unwrap();
        let back = PoseSE3::from_matrix(&pose.to_matrix()).unwrap();
        assert_eq!(back, pose);
        let (r, t) = pose.extrinsics();
        let again = PoseSE3::from_extrinsics(&r, &t);
        assert!(again.translation_error(&pose) < 1e-12);
    }
}
