//! Rigid transforms, rotations and the pinhole camera model.
//!
//! Every [`Pose`] is a transform `a <- b` between two named frames: the
//! rotation and translation map coordinates expressed in frame `b` into
//! frame `a`. Frames `{b}` (robot base) and `{e}` (end effector) are metric;
//! `{c0}` and `{ci}` (visual odometry) carry the odometry's arbitrary units.
//! The frame pair of each value is documented where it is produced.

use nalgebra::{Matrix3, Matrix4, Quaternion, Rotation3, Unit, UnitQuaternion, Vector2, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Proper rotation stored as an orthonormal 3x3 matrix.
pub type Rotation = Rotation3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// SE(3) rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Rotation::identity(), Vector3::zeros())
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(Rotation::identity(), translation)
    }

    pub fn from_rotation(rotation: Rotation) -> Self {
        Self::new(rotation, Vector3::zeros())
    }

    /// Builds a pose from a translation and an `[x, y, z, w]` quaternion.
    /// The quaternion is normalized.
    pub fn from_translation_quaternion(translation: Vector3<f64>, xyzw: [f64; 4]) -> Self {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(xyzw[3], xyzw[0], xyzw[1], xyzw[2]));
        Self::new(q.to_rotation_matrix(), translation)
    }

    /// Rotation as a normalized `[x, y, z, w]` quaternion with `w >= 0`.
    pub fn quaternion_xyzw(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_rotation_matrix(&self.rotation);
        let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
        [q.i, q.j, q.k, q.w]
    }

    /// `self ∘ other`: apply `other`, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.inverse();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Reads the upper 3x4 block of a homogeneous matrix. The rotation
    /// block is taken as-is and must already be orthonormal.
    pub fn from_homogeneous(m: &Matrix4<f64>) -> Pose {
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        Pose {
            rotation: Rotation::from_matrix_unchecked(r),
            translation: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

/// Axis-angle decomposition of a rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisAngle {
    pub axis: Unit<Vector3<f64>>,
    /// Radians, in `[0, π]`.
    pub angle: f64,
}

impl AxisAngle {
    /// `angle * axis`.
    pub fn scaled_axis(&self) -> Vector3<f64> {
        self.axis.into_inner() * self.angle
    }
}

/// Extracts `(axis, angle)` from a rotation matrix.
///
/// For angles below ~1e-15 the axis is arbitrary and `(0, 0, 1)` is
/// returned. Beyond `3π/4` the axis is read from the symmetric part of the
/// matrix using its largest diagonal element, which stays well conditioned
/// up to and including `π`.
pub fn angle_axis(r: &Rotation) -> AxisAngle {
    let m = r.matrix();
    let trace = m.trace();
    let skew = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
    let sin_theta = 0.5 * skew.norm();
    let cos_theta = (0.5 * (trace - 1.0)).clamp(-1.0, 1.0);
    let angle = sin_theta.atan2(cos_theta);

    if angle < 3.0 * std::f64::consts::FRAC_PI_4 {
        let n = skew.norm();
        if n < 1e-15 {
            return AxisAngle { axis: Vector3::z_axis(), angle: 0.0 };
        }
        return AxisAngle { axis: Unit::new_unchecked(skew / n), angle };
    }

    let sym = (m + m.transpose()) * 0.5;
    let one_minus_cos = 1.0 - cos_theta;
    let k = (0..3)
        .max_by(|&a, &b| sym[(a, a)].total_cmp(&sym[(b, b)]))
        .unwrap_or(0);
    let ak = ((sym[(k, k)] - cos_theta) / one_minus_cos).max(0.0).sqrt();
    let mut axis = Vector3::zeros();
    for j in 0..3 {
        axis[j] = if j == k { ak } else { sym[(k, j)] / (one_minus_cos * ak) };
    }
    if axis.dot(&skew) < 0.0 {
        axis = -axis;
    }
    AxisAngle { axis: Unit::new_normalize(axis), angle }
}

/// Rotation about `axis` by `angle` (Rodrigues).
pub fn rotation_from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Rotation {
    match Unit::try_new(*axis, 1e-300) {
        Some(u) => Rotation::from_axis_angle(&u, angle),
        None => Rotation::identity(),
    }
}

/// Rotation whose axis-angle vector is `w` (the SO(3) exponential).
pub fn rotation_exp(w: &Vector3<f64>) -> Rotation {
    Rotation::new(*w)
}

pub fn rot_x(angle: f64) -> Rotation {
    Rotation::from_axis_angle(&Vector3::x_axis(), angle)
}

pub fn rot_y(angle: f64) -> Rotation {
    Rotation::from_axis_angle(&Vector3::y_axis(), angle)
}

pub fn rot_z(angle: f64) -> Rotation {
    Rotation::from_axis_angle(&Vector3::z_axis(), angle)
}

/// Angle of `r1ᵀ·r2`, in `[0, π]`.
pub fn geodesic_distance(r1: &Rotation, r2: &Rotation) -> f64 {
    angle_axis(&(r1.inverse() * r2)).angle
}

/// Projects an arbitrary 3x3 matrix onto SO(3) (closest rotation in the
/// Frobenius norm), flipping the weakest singular direction when needed so
/// the determinant is `+1`.
pub fn project_to_so3(m: &Matrix3<f64>) -> Rotation {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let d = (u * v_t).determinant().signum();
    let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t;
    Rotation::from_matrix_unchecked(r)
}

/// Uniformly distributed rotation.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    let q = Quaternion::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    );
    UnitQuaternion::from_quaternion(q).to_rotation_matrix()
}

/// Rotation by an isotropic Gaussian perturbation with per-axis standard
/// deviation `sigma` (radians).
pub fn random_small_rotation<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> Rotation {
    if sigma == 0.0 {
        return Rotation::identity();
    }
    let w = Vector3::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    ) * sigma;
    rotation_exp(&w)
}

/// Pinhole intrinsics. Pixel `(0, 0)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self { fx: 220.0, fy: 220.0, cx: 160.0, cy: 120.0, width: 320, height: 240 }
    }
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics("focal lengths must be positive".into()));
        }
        if !(0.0 <= self.cx && self.cx < self.width as f64 && 0.0 <= self.cy && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidIntrinsics("principal point outside the image".into()));
        }
        Ok(())
    }

    pub fn project(&self, p_cam: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if p_cam.z <= 0.0 {
            return Err(GeometryError::BehindCamera(p_cam.z));
        }
        Ok(Vector2::new(
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        ))
    }

    pub fn back_project(&self, pixel: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        let n = self.normalize(pixel);
        Vector3::new(n.x * depth, n.y * depth, depth)
    }

    /// Pixel to normalized image coordinates `(x/z, y/z)`.
    pub fn normalize(&self, pixel: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy)
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0 && pixel.y >= 0.0 && pixel.x < self.width as f64 && pixel.y < self.height as f64
    }

    /// True when the pixel lies in the central half of the image along both axes.
    pub fn in_central_half(&self, pixel: &Vector2<f64>) -> bool {
        let (w, h) = (self.width as f64, self.height as f64);
        pixel.x >= 0.25 * w && pixel.x <= 0.75 * w && pixel.y >= 0.25 * h && pixel.y <= 0.75 * h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TwistFrame {
    Camera,
    Base,
}

/// Velocity command: linear (units/s) and angular (rad/s) parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Twist {
    pub linear: Vector3<f64>,
    pub angular: Vector3<f64>,
    pub frame: TwistFrame,
}

impl Twist {
    pub fn new(linear: Vector3<f64>, angular: Vector3<f64>, frame: TwistFrame) -> Self {
        Self { linear, angular, frame }
    }

    pub fn zero(frame: TwistFrame) -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros(), frame)
    }

    pub fn is_finite(&self) -> bool {
        self.linear.iter().chain(self.angular.iter()).all(|x| x.is_finite())
    }

    /// Scales each part down so `|linear| <= v_max` and `|angular| <= w_max`.
    pub fn clamped(&self, v_max: f64, w_max: f64) -> Twist {
        let clamp = |v: Vector3<f64>, max: f64| {
            let n = v.norm();
            if n > max {
                v * (max / n)
            } else {
                v
            }
        };
        Twist::new(clamp(self.linear, v_max), clamp(self.angular, w_max), self.frame)
    }
}

impl std::ops::Neg for Twist {
    type Output = Twist;

    fn neg(self) -> Twist {
        Twist::new(-self.linear, -self.angular, self.frame)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    /// Independent Rodrigues reconstruction used as the oracle.
    fn rodrigues(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
        let k = Matrix3::new(0.0, -axis.z, axis.y, axis.z, 0.0, -axis.x, -axis.y, axis.x, 0.0);
        Matrix3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos())
    }

    fn max_abs(m: &Matrix3<f64>) -> f64 {
        m.iter().fold(0.0f64, |a, x| a.max(x.abs()))
    }

    fn pose_from_seed(seed: u64) -> Pose {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        Pose::new(random_rotation(&mut rng), t)
    }

    #[test]
    fn compose_identity_and_inverse() {
        let p = pose_from_seed(3);
        let c = Pose::identity().compose(&p);
        assert_relative_eq!(c.to_homogeneous(), p.to_homogeneous(), epsilon = 1e-15);
        let i = p.compose(&p.inverse());
        assert_relative_eq!(i.to_homogeneous(), Matrix4::identity(), epsilon = 1e-9);
    }

    #[test]
    fn compose_matches_homogeneous_product() {
        let a = Pose::from_rotation(rot_z(FRAC_PI_2));
        let b = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let oracle = a.to_homogeneous() * b.to_homogeneous();
        let c = a.compose(&b);
        assert_relative_eq!(c.translation, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-15);
        assert_relative_eq!(c.to_homogeneous(), oracle, epsilon = 1e-15);
    }

    #[test]
    fn inverse_matches_matrix_inversion() {
        assert_eq!(Pose::identity().inverse(), Pose::identity());
        let p = Pose::new(rot_z(FRAC_PI_2), Vector3::new(1.0, 0.0, 0.0));
        let oracle = p.to_homogeneous().try_inverse().unwrap();
        let inv = p.inverse();
        // −Rᵀ·t with Rᵀ = rotZ(−90°): −(0, −1, 0)
        assert_relative_eq!(inv.translation, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-15);
        assert_relative_eq!(inv.to_homogeneous(), oracle, epsilon = 1e-15);
        let q = pose_from_seed(11);
        assert_relative_eq!(q.inverse().inverse().to_homogeneous(), q.to_homogeneous(), epsilon = 1e-12);
    }

    #[test]
    fn angle_axis_known_rotations() {
        let id = angle_axis(&Rotation::identity());
        assert_eq!(id.angle, 0.0);
        assert_eq!(id.axis.into_inner(), Vector3::z());

        let z = angle_axis(&rot_z(FRAC_PI_2));
        assert_relative_eq!(z.angle, FRAC_PI_2, epsilon = 1e-12);
        assert_relative_eq!(z.axis.into_inner(), Vector3::z(), epsilon = 1e-12);
        assert_relative_eq!(rodrigues(&Vector3::z(), FRAC_PI_2), *rot_z(FRAC_PI_2).matrix(), epsilon = 1e-15);

        let x = angle_axis(&rot_x(PI));
        assert_relative_eq!(x.angle, PI, epsilon = 1e-12);
        assert_relative_eq!(x.axis.into_inner().x.abs(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(rodrigues(&x.axis, x.angle), *rot_x(PI).matrix(), epsilon = 1e-12);
    }

    #[test]
    fn angle_axis_round_trip_random_and_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut worst = 0.0f64;
        for i in 0..1000 {
            let axis = random_rotation(&mut rng) * Vector3::x();
            let angle = match i % 4 {
                0 => rng.random_range(0.0..1e-6),
                1 => PI - rng.random_range(0.0..1e-6),
                2 => PI,
                _ => rng.random_range(0.0..PI),
            };
            let r = Rotation::from_matrix_unchecked(rodrigues(&axis, angle));
            let aa = angle_axis(&r);
            assert!((0.0..=PI).contains(&aa.angle));
            let back = rodrigues(&aa.axis, aa.angle);
            worst = worst.max(max_abs(&(back - r.matrix())));
        }
        assert!(worst < 1e-9, "worst round-trip error {worst}");
    }

    #[test]
    fn project_examples() {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
        assert_eq!(k.project(&Vector3::new(0.0, 0.0, 1.0)).unwrap(), Vector2::new(320.0, 240.0));
        assert_relative_eq!(k.project(&Vector3::new(0.1, 0.0, 1.0)).unwrap(), Vector2::new(370.0, 240.0));
        assert_relative_eq!(k.project(&Vector3::new(0.0, -0.2, 2.0)).unwrap(), Vector2::new(320.0, 190.0));
        assert!(matches!(k.project(&Vector3::new(0.0, 0.0, -1.0)), Err(GeometryError::BehindCamera(_))));
        assert!(k.project(&Vector3::new(0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::default().validate().is_ok());
    }

    #[test]
    fn geodesic_examples() {
        let r = rot_y(0.3);
        assert_eq!(geodesic_distance(&r, &r), 0.0);
        assert_relative_eq!(geodesic_distance(&Rotation::identity(), &rot_z(FRAC_PI_2)), FRAC_PI_2, epsilon = 1e-12);
        let a = rot_x(0.4) * rot_z(1.1);
        let b = rot_y(-0.7);
        assert_relative_eq!(geodesic_distance(&a, &b), geodesic_distance(&b, &a), epsilon = 1e-12);
    }

    #[test]
    fn twist_clamp() {
        let t = Twist::new(Vector3::new(3.0, 4.0, 0.0), Vector3::new(0.0, 0.0, 0.1), TwistFrame::Camera);
        let c = t.clamped(1.0, 1.0);
        assert_relative_eq!(c.linear.norm(), 1.0, epsilon = 1e-15);
        assert_eq!(c.angular, t.angular);
    }

    #[test]
    fn so3_projection_is_proper() {
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        let r = project_to_so3(&m);
        assert_relative_eq!(r.matrix().determinant(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn quaternion_round_trip() {
        let p = pose_from_seed(5);
        let q = p.quaternion_xyzw();
        let back = Pose::from_translation_quaternion(p.translation, q);
        assert_relative_eq!(back.to_homogeneous(), p.to_homogeneous(), epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn compose_is_associative(a in any::<u64>(), b in any::<u64>(), c in any::<u64>()) {
            let (a, b, c) = (pose_from_seed(a), pose_from_seed(b), pose_from_seed(c));
            let lhs = a.compose(&b).compose(&c).to_homogeneous();
            let rhs = a.compose(&b.compose(&c)).to_homogeneous();
            prop_assert!((lhs - rhs).abs().max() < 1e-9);
        }

        #[test]
        fn project_back_project_round_trip(
            x in -1.0f64..1.0, y in -1.0f64..1.0, z in 0.05f64..10.0,
        ) {
            let k = CameraIntrinsics::new(480.0, 510.0, 319.5, 241.0, 640, 480).unwrap();
            let p = Vector3::new(x, y, z);
            let px = k.project(&p).unwrap();
            let back = k.back_project(&px, z);
            prop_assert!((back - p).norm() < 1e-9);
        }
    }
}
