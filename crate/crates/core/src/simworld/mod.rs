//! Simulated remote workcell: scene, free-flying eye-in-hand end effector,
//! exploration routine, odometry stand-in, rendering and error measurement.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::CalibrationSample;
use crate::geometry::{rot_x, rotation_exp, CameraIntrinsics, Pose, Rotation, Twist, TwistFrame};

mod render;
mod scene;
mod vo;

pub use render::{render_image, FeatureAnnotation, SyntheticImage, MARKER_SIZE};
pub use scene::{default_workspace, Aabb, Landmark, Scene, BACKGROUND_TAG};
pub use vo::{simulate_vo, MapBuilder, MapPoint, VisualOdometry, VoConfig, VoOutput, MIN_OBSERVATIONS, NEAR_PLANE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("infeasible exploration trajectory: {0}")]
    InfeasibleTrajectory(String),
    #[error("end effector would leave the workspace at {0:?}")]
    WorkspaceViolation([f64; 3]),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
}

/// Fingertip distance at or below which a trial counts as a success.
pub const SUCCESS_THRESHOLD_MM: f64 = 10.0;

/// Default `e <- c`: camera mounted 4 cm along `y` and 2 cm along `z` of
/// the end effector, tilted 5° about `x`.
pub fn default_ee_from_cam() -> Pose {
    Pose::new(rot_x(5f64.to_radians()), Vector3::new(0.0, 0.04, 0.02))
}

/// Default fingertip offset in `{e}`.
pub fn default_tool_offset() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, 0.16)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    /// `b <- e`, meters.
    pub ee_pose: Pose,
    /// Simulated seconds.
    pub time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionLimits {
    /// m/s
    pub v_max: f64,
    /// rad/s
    pub w_max: f64,
}

impl Default for MotionLimits {
    fn default() -> Self {
        Self { v_max: 0.25, w_max: 0.8 }
    }
}

/// Integrates a camera-frame twist for `dt` seconds.
///
/// The camera pose advances by `R' = R·exp(ω·dt)` and
/// `p' = p + R·exp(ω·dt/2)·v·dt` (translation along the mid-step
/// orientation, which makes a step followed by its negation an exact
/// round trip); the end effector follows rigidly through `ee_from_cam`.
pub fn step_robot(
    state: &RobotState,
    cmd: &Twist,
    ee_from_cam: &Pose,
    dt: f64,
    limits: &MotionLimits,
    workspace: &Aabb,
) -> Result<RobotState, SimError> {
    if !(dt > 0.0) {
        return Err(SimError::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    if !cmd.is_finite() {
        return Err(SimError::InvalidArgument("non-finite twist".into()));
    }
    let cam = state.ee_pose.compose(ee_from_cam);
    let cmd = match cmd.frame {
        TwistFrame::Camera => *cmd,
        TwistFrame::Base => {
            let rt = cam.rotation.inverse();
            Twist::new(rt * cmd.linear, rt * cmd.angular, TwistFrame::Camera)
        }
    };
    let cmd = cmd.clamped(limits.v_max, limits.w_max);
    let half = rotation_exp(&(cmd.angular * (0.5 * dt)));
    let full = rotation_exp(&(cmd.angular * dt));
    let next_cam = Pose::new(cam.rotation * full, cam.translation + cam.rotation * (half * (cmd.linear * dt)));
    let ee_pose = next_cam.compose(&ee_from_cam.inverse());
    if !workspace.contains(&ee_pose.translation) {
        let t = ee_pose.translation;
        return Err(SimError::WorkspaceViolation([t.x, t.y, t.z]));
    }
    Ok(RobotState { ee_pose, time: state.time + dt })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalError {
    pub error_mm: f64,
    pub success: bool,
}

/// Fingertip-to-target distance and the 10 mm success decision.
pub fn measure_final_error(state: &RobotState, target: &Vector3<f64>, tool_offset: &Vector3<f64>) -> FinalError {
    let tip = state.ee_pose.transform_point(tool_offset);
    let error_mm = 1000.0 * (tip - target).norm();
    FinalError { error_mm, success: error_mm <= SUCCESS_THRESHOLD_MM }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplorationConfig {
    pub center: Vector3<f64>,
    pub radius: f64,
    pub n_poses: usize,
    /// Half-angle of the cap around `+z_b`.
    pub cone_half_angle: f64,
    pub rng_seed: u64,
}

impl ExplorationConfig {
    pub fn around(center: Vector3<f64>) -> Self {
        Self { center, radius: 0.35, n_poses: 30, cone_half_angle: 35f64.to_radians(), rng_seed: 0 }
    }
}

/// Rotation `b <- c` taking camera-frame direction `w` onto base-frame
/// direction `d`, with the camera `x` axis kept horizontal.
fn look_rotation(w: &Vector3<f64>, d: &Vector3<f64>) -> Rotation {
    let c1 = w.normalize();
    let c2 = (Vector3::x() - c1 * c1.x).normalize();
    let c3 = c1.cross(&c2);
    let b1 = d.normalize();
    let mut h = Vector3::z().cross(&b1);
    if h.norm() < 1e-6 {
        h = Vector3::x();
    }
    let b2 = (h - b1 * h.dot(&b1)).normalize();
    let b3 = b1.cross(&b2);
    let cb = Matrix3::from_columns(&[b1, b2, b3]);
    let cc = Matrix3::from_columns(&[c1, c2, c3]);
    Rotation::from_matrix_unchecked(cb * cc.transpose())
}

/// End-effector poses `b <- ei` on a spherical cap around `center`.
///
/// Directions follow a Fibonacci spiral over the cap (apex first) with
/// seeded jitter. The end-effector origin lies exactly on the sphere and
/// the orientation is solved so the camera optical axis, offset by
/// `ee_from_cam`, passes through `center`.
pub fn exploration_trajectory(cfg: &ExplorationConfig, ee_from_cam: &Pose, workspace: &Aabb) -> Result<Vec<Pose>, SimError> {
    if !(cfg.radius > 0.0) || cfg.n_poses < 3 {
        return Err(SimError::InvalidArgument("radius must be positive and n_poses >= 3".into()));
    }
    let cam_from_ee = ee_from_cam.inverse();
    let t_ce = cam_from_ee.translation;
    let lateral = t_ce.x * t_ce.x + t_ce.y * t_ce.y;
    if lateral >= cfg.radius * cfg.radius {
        return Err(SimError::InfeasibleTrajectory("camera offset exceeds the radius".into()));
    }
    let mu = t_ce.z + (cfg.radius * cfg.radius - lateral).sqrt();
    let w = Vector3::z() * mu - t_ce;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let n = cfg.n_poses as f64;
    let cos_cap = cfg.cone_half_angle.cos();
    let mut poses = Vec::with_capacity(cfg.n_poses);
    for k in 0..cfg.n_poses {
        let frac = ((k as f64 + 0.5 + rng.random_range(-0.3..0.3)) / n).clamp(0.0, 1.0);
        let cos_t = 1.0 - (1.0 - cos_cap) * frac;
        let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
        let phi = k as f64 * golden + rng.random_range(-0.2..0.2);
        let dir = Vector3::new(sin_t * phi.cos(), sin_t * phi.sin(), cos_t);
        let t_be = cfg.center + dir * cfg.radius;
        if !workspace.contains(&t_be) {
            return Err(SimError::InfeasibleTrajectory(format!("pose {k} at {:?} leaves the workspace", t_be.as_slice())));
        }
        let r_bc = look_rotation(&w, &(cfg.center - t_be));
        poses.push(Pose::new(r_bc * cam_from_ee.rotation, t_be));
    }
    Ok(poses)
}

/// Parameters of one simulated workcell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub intrinsics: CameraIntrinsics,
    /// True `e <- c`.
    pub ee_from_cam: Pose,
    /// Fingertip in `{e}`, meters.
    pub tool_offset: Vector3<f64>,
    pub limits: MotionLimits,
    /// Standard deviation of tracked-pixel noise.
    pub pixel_noise_sigma: f64,
    pub rng_seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics::default(),
            ee_from_cam: default_ee_from_cam(),
            tool_offset: default_tool_offset(),
            limits: MotionLimits::default(),
            pixel_noise_sigma: 0.0,
            rng_seed: 0,
        }
    }
}

/// Mutable simulation handle owned by one session loop.
#[derive(Debug, Clone)]
pub struct World {
    pub scene: Scene,
    pub cfg: WorldConfig,
    pub state: RobotState,
    vo: Option<VisualOdometry>,
    pixel_rng: ChaCha8Rng,
}

impl World {
    pub fn new(scene: Scene, cfg: WorldConfig, ee_pose: Pose) -> Self {
        let pixel_rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ 0xA5A5_5A5A_0F0F_F0F0);
        Self { scene, cfg, state: RobotState { ee_pose, time: 0.0 }, vo: None, pixel_rng }
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.cfg.intrinsics
    }

    /// True `b <- c`.
    pub fn camera_pose(&self) -> Pose {
        self.state.ee_pose.compose(&self.cfg.ee_from_cam)
    }

    /// Moves the end effector directly (exploration waypoints), advancing
    /// the clock by `duration`.
    pub fn teleport(&mut self, ee_pose: Pose, duration: f64) -> Result<(), SimError> {
        if !self.scene.workspace.contains(&ee_pose.translation) {
            let t = ee_pose.translation;
            return Err(SimError::WorkspaceViolation([t.x, t.y, t.z]));
        }
        self.state = RobotState { ee_pose, time: self.state.time + duration };
        Ok(())
    }

    pub fn step(&mut self, twist: &Twist, dt: f64) -> Result<(), SimError> {
        self.state = step_robot(&self.state, twist, &self.cfg.ee_from_cam, dt, &self.cfg.limits, &self.scene.workspace)?;
        Ok(())
    }

    /// Starts odometry with the current camera pose as `{c0}`.
    pub fn start_vo(&mut self, cfg: VoConfig) -> &VisualOdometry {
        self.vo.insert(VisualOdometry::new(cfg, self.camera_pose()))
    }

    pub fn vo(&self) -> Option<&VisualOdometry> {
        self.vo.as_ref()
    }

    /// Odometry reading `c0 <- c` for the current camera pose.
    pub fn vo_camera_pose(&mut self) -> Option<Pose> {
        let cam = self.camera_pose();
        self.vo.as_mut().map(|vo| vo.observe(&cam))
    }

    pub fn render(&self) -> SyntheticImage {
        render_image(&self.scene, &self.camera_pose(), &self.cfg.intrinsics)
    }

    /// Tracked pixel positions of the given features, with pixel noise.
    /// Returns the first id that is not visible as the error.
    pub fn track(&mut self, ids: &[u32]) -> Result<Vec<Vector2<f64>>, u32> {
        let img = self.render();
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            let a = img.annotation(id).ok_or(id)?;
            let mut px = a.pixel();
            if self.cfg.pixel_noise_sigma > 0.0 {
                px.x += self.pixel_rng.sample::<f64, _>(StandardNormal) * self.cfg.pixel_noise_sigma;
                px.y += self.pixel_rng.sample::<f64, _>(StandardNormal) * self.cfg.pixel_noise_sigma;
            }
            out.push(px);
        }
        Ok(out)
    }

    /// True depth of a landmark along the current optical axis.
    pub fn depth(&self, id: u32) -> Option<f64> {
        let l = self.scene.landmark(id)?;
        Some(self.camera_pose().inverse().transform_point(&l.position).z)
    }

    pub fn final_error(&self, target: &Vector3<f64>) -> FinalError {
        measure_final_error(&self.state, target, &self.cfg.tool_offset)
    }

    /// True camera pose with the fingertip on `target` and the end
    /// effector at rotation `ee_rotation`.
    pub fn goal_camera_pose(&self, target: &Vector3<f64>, ee_rotation: &Rotation) -> Pose {
        let ee = Pose::new(*ee_rotation, target - ee_rotation * self.cfg.tool_offset);
        ee.compose(&self.cfg.ee_from_cam)
    }

    /// Runs the exploration routine: visits each pose in turn (advancing
    /// the clock by travel distance over `speed`), starts odometry at the
    /// first one and records one calibration sample per keyframe.
    /// `on_keyframe` receives the keyframe index, its sample and the map
    /// points it completed.
    pub fn explore(
        &mut self,
        ee_poses: &[Pose],
        vo_cfg: VoConfig,
        speed: f64,
        mut on_keyframe: impl FnMut(usize, &CalibrationSample, &[MapPoint]),
    ) -> Result<Vec<CalibrationSample>, SimError> {
        if !(speed > 0.0) || !vo_cfg.is_valid() {
            return Err(SimError::InvalidArgument("exploration needs positive speed and a valid VO config".into()));
        }
        let Some(first) = ee_poses.first() else { return Ok(Vec::new()) };
        let mut map = MapBuilder::new(&vo_cfg, self.cfg.intrinsics);
        let mut samples = Vec::new();
        let travel = (first.translation - self.state.ee_pose.translation).norm() / speed;
        self.teleport(*first, travel)?;
        self.start_vo(vo_cfg);
        for (i, pose) in ee_poses.iter().enumerate() {
            if i > 0 {
                let travel = (pose.translation - self.state.ee_pose.translation).norm() / speed;
                self.teleport(*pose, travel)?;
            }
            if i % vo_cfg.keyframe_stride.max(1) != 0 {
                continue;
            }
            let cam = self.camera_pose();
            let vo = self.vo.as_mut().expect("odometry started above");
            let cam_in_c0 = if i == 0 { Pose::identity() } else { vo.observe(&cam) };
            let fresh = map.add_keyframe(vo, &cam, &self.scene);
            let sample = CalibrationSample { cam_in_c0, ee_in_base: *pose };
            on_keyframe(samples.len(), &sample, &fresh);
            samples.push(sample);
        }
        Ok(samples)
    }
}
