//! Coarse PBVS and fine IBVS controllers plus the loops that run them
//! against a [`World`].
//!
//! Pose errors are computed in a metric version of `{c0}`: odometry
//! translations are multiplied by the calibrated scale `D` before the
//! control law sees them, so gains and thresholds are in meters.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{HandEyeResult, ScaleMatrix};
use crate::geometry::{angle_axis, CameraIntrinsics, Pose, Rotation, Twist, TwistFrame};
use crate::simworld::{SimError, World};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("feature depth must be positive, got {0}")]
    InvalidDepth(f64),
    #[error("degenerate feature configuration: {0}")]
    DegenerateFeatures(String),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("coarse phase did not converge in {steps} steps (position error {position_error_m:.4} m)")]
    CoarseTimeout { steps: usize, position_error_m: f64 },
    #[error("fine phase did not converge in {steps} steps (pixel error {pixel_rms:.3} px)")]
    FineTimeout { steps: usize, pixel_rms: f64 },
    #[error("feature {0} left the field of view")]
    TrackingLost(u32),
    #[error("odometry is not running")]
    NoOdometry,
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Default retraction from the target along the desired optical axis.
pub const DEFAULT_STANDOFF: f64 = 0.15;
pub const MAX_FINE_PAIRS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoarseTask {
    /// Target point, `{c0}` odometry units.
    pub target_c0: Vector3<f64>,
    /// Desired `b <- e*` rotation.
    pub desired_ee_rotation: Rotation,
    /// Meters.
    pub standoff: f64,
}

impl CoarseTask {
    pub fn new(target_c0: Vector3<f64>, desired_ee_rotation: Rotation, standoff: f64) -> Result<Self, ControlError> {
        if !(standoff >= 0.0) || !target_c0.iter().all(|v| v.is_finite()) {
            return Err(ControlError::InvalidTask("standoff must be non-negative and the target finite".into()));
        }
        Ok(Self { target_c0, desired_ee_rotation, standoff })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PbvsError {
    /// Position error expressed in `{c*}`.
    pub e_l: Vector3<f64>,
    /// `c* <- c` rotation.
    pub e_w: Rotation,
    /// Angle times axis of `e_w`.
    pub e_w_vec: Vector3<f64>,
}

impl PbvsError {
    pub fn angle(&self) -> f64 {
        self.e_w_vec.norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeaturePair {
    pub id: u32,
    pub current: Vector2<f64>,
    pub desired: Vector2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTask {
    pub pairs: Vec<FeaturePair>,
    /// Per-pair depth along the optical axis, meters.
    pub depths: Vec<f64>,
}

impl FineTask {
    pub fn new(pairs: Vec<FeaturePair>, depths: Vec<f64>) -> Result<Self, ControlError> {
        let task = Self { pairs, depths };
        task.validate(None)?;
        Ok(task)
    }

    /// Checks pair count, depths and, given intrinsics, that every pixel
    /// lies inside the image.
    pub fn validate(&self, k: Option<&CameraIntrinsics>) -> Result<(), ControlError> {
        if self.pairs.is_empty() || self.pairs.len() > MAX_FINE_PAIRS {
            return Err(ControlError::InvalidTask(format!("need 1..={MAX_FINE_PAIRS} pairs, got {}", self.pairs.len())));
        }
        if self.depths.len() != self.pairs.len() {
            return Err(ControlError::InvalidTask("one depth per pair is required".into()));
        }
        if let Some(&z) = self.depths.iter().find(|z| !(**z > 0.0)) {
            return Err(ControlError::InvalidDepth(z));
        }
        if let Some(k) = k {
            for p in &self.pairs {
                if !k.contains(&p.current) || !k.contains(&p.desired) {
                    return Err(ControlError::InvalidTask(format!("pixels of feature {} are outside the image", p.id)));
                }
            }
        }
        Ok(())
    }

    pub fn ids(&self) -> Vec<u32> {
        self.pairs.iter().map(|p| p.id).collect()
    }

    pub fn pixel_rms(&self) -> f64 {
        pixel_rms(self.pairs.iter().map(|p| p.current - p.desired))
    }
}

fn pixel_rms(errors: impl Iterator<Item = Vector2<f64>>) -> f64 {
    let (sum, n) = errors.fold((0.0, 0usize), |(s, n), e| (s + e.norm_squared(), n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainConfig {
    /// 1/s
    pub kp: f64,
    /// s
    pub kd: f64,
    /// 1/s
    pub ibvs_lambda: f64,
    /// Control period, seconds.
    pub dt: f64,
    /// Meters.
    pub coarse_position_tol: f64,
    /// Radians.
    pub coarse_angle_tol: f64,
    /// Pixels, compared with the window-averaged RMS error.
    pub fine_pixel_tol: f64,
    /// Number of recent steps whose error vectors are averaged before the
    /// fine-phase tolerance test. 1 uses the raw measurement.
    pub fine_window: usize,
    pub max_coarse_steps: usize,
    pub max_fine_steps: usize,
}

impl Default for GainConfig {
    fn default() -> Self {
        Self {
            kp: 0.8,
            kd: 0.1,
            ibvs_lambda: 0.5,
            dt: 0.05,
            coarse_position_tol: 5e-3,
            coarse_angle_tol: 1e-2,
            fine_pixel_tol: 0.5,
            fine_window: 8,
            max_coarse_steps: 2000,
            max_fine_steps: 3000,
        }
    }
}

impl GainConfig {
    pub fn validate(&self) -> Result<(), ControlError> {
        let positive = [self.kp, self.ibvs_lambda, self.dt, self.coarse_position_tol, self.coarse_angle_tol, self.fine_pixel_tol];
        if positive.iter().any(|v| !(*v > 0.0)) || !(self.kd >= 0.0) || self.fine_window == 0 {
            return Err(ControlError::InvalidTask("gains and thresholds must be positive (kd non-negative)".into()));
        }
        Ok(())
    }
}

/// Odometry pose with its translation converted to meters.
pub fn metric_pose(pose_c0: &Pose, scale: &ScaleMatrix) -> Pose {
    Pose::new(pose_c0.rotation, scale.apply(&pose_c0.translation))
}

/// Desired camera pose `c0 <- c*` in odometry units.
///
/// Rotation: `(b Rc0)ᵀ · b Re* · e Rc`. Position: the end effector goes to
/// the target and the camera sits at `-c0 Rc*·t0` from it, after the
/// whole arrangement is pulled back by `standoff` meters along the desired
/// optical axis.
pub fn desired_camera_pose(task: &CoarseTask, calib: &HandEyeResult) -> Pose {
    let r_ec = calib.ee_from_cam_rotation();
    let r = calib.base_from_c0.rotation.inverse() * task.desired_ee_rotation * r_ec;
    let retreat = calib.scale.apply_inverse(&(r * Vector3::z() * task.standoff));
    Pose::new(r, task.target_c0 - retreat - r * calib.t0)
}

/// Pose error between current and desired camera poses, both in the same
/// (metric) `{c0}`.
pub fn pbvs_error(current: &Pose, desired: &Pose) -> PbvsError {
    let rt = desired.rotation.inverse();
    let e_w = rt * current.rotation;
    PbvsError { e_l: rt * (current.translation - desired.translation), e_w, e_w_vec: angle_axis(&e_w).scaled_axis() }
}

/// PD law. The linear part is computed in `{c*}` and rotated into the
/// current camera frame by `e_wᵀ`.
pub fn pbvs_step(err: &PbvsError, prev: Option<&PbvsError>, dt: f64, gains: &GainConfig) -> Twist {
    let (dl, dw) = match prev {
        Some(p) if dt > 0.0 => ((err.e_l - p.e_l) / dt, (err.e_w_vec - p.e_w_vec) / dt),
        _ => (Vector3::zeros(), Vector3::zeros()),
    };
    let v_star = -(err.e_l * gains.kp + dl * gains.kd);
    let linear = err.e_w.inverse() * v_star;
    let angular = -(err.e_w_vec * gains.kp + dw * gains.kd);
    Twist::new(linear, angular, TwistFrame::Camera)
}

/// Point-feature interaction matrix for normalized coordinates `(x, y)`
/// at depth `z`. Columns: `vx vy vz wx wy wz`.
pub fn interaction_matrix(x: f64, y: f64, z: f64) -> Result<SMatrix<f64, 2, 6>, ControlError> {
    if !(z > 0.0) {
        return Err(ControlError::InvalidDepth(z));
    }
    #[rustfmt::skip]
    let l = SMatrix::<f64, 2, 6>::new(
        -1.0 / z, 0.0, x / z, x * y, -(1.0 + x * x), y,
        0.0, -1.0 / z, y / z, 1.0 + y * y, -x * y, -x,
    );
    Ok(l)
}

/// Relative singular-value floor used for rank decisions.
const RANK_EPS: f64 = 1e-9;

/// `−λ·pinv(L)·(s − s*)` over all pairs. A single feature drives only the
/// three translational columns.
pub fn ibvs_step(task: &FineTask, k: &CameraIntrinsics, gains: &GainConfig) -> Result<Twist, ControlError> {
    task.validate(None)?;
    let n = task.pairs.len();
    let cols = if n == 1 { 3 } else { 6 };
    let mut l = DMatrix::<f64>::zeros(2 * n, cols);
    let mut e = DVector::<f64>::zeros(2 * n);
    for (i, (pair, &z)) in task.pairs.iter().zip(&task.depths).enumerate() {
        let s = k.normalize(&pair.current);
        let s_star = k.normalize(&pair.desired);
        let li = interaction_matrix(s.x, s.y, z)?;
        l.view_mut((2 * i, 0), (2, cols)).copy_from(&li.columns(0, cols));
        e[2 * i] = s.x - s_star.x;
        e[2 * i + 1] = s.y - s_star.y;
    }
    if e.iter().all(|v| *v == 0.0) {
        return Ok(Twist::zero(TwistFrame::Camera));
    }
    let svd = l.svd(true, true);
    let smax = svd.singular_values.max();
    let need = cols.min(2 * n);
    let rank = svd.singular_values.iter().filter(|s| **s > RANK_EPS * smax).count();
    if smax <= 0.0 || rank < need {
        return Err(ControlError::DegenerateFeatures(format!("interaction matrix rank {rank}, need {need}")));
    }
    let pinv = svd.pseudo_inverse(RANK_EPS * smax).map_err(|m| ControlError::DegenerateFeatures(m.to_string()))?;
    let v = -(pinv * e) * gains.ibvs_lambda;
    let linear = Vector3::new(v[0], v[1], v[2]);
    let angular = if cols == 6 { Vector3::new(v[3], v[4], v[5]) } else { Vector3::zeros() };
    Ok(Twist::new(linear, angular, TwistFrame::Camera))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarsePhaseReport {
    pub steps: usize,
    pub position_error_m: f64,
    pub angle_error_rad: f64,
    pub position_errors: Vec<f64>,
    pub angle_errors: Vec<f64>,
    pub sim_time_s: f64,
    pub wall_time_s: f64,
    /// True projection of the target at the end of the phase.
    pub target_pixel: Option<[f64; 2]>,
    pub target_in_central_half: bool,
}

impl CoarsePhaseReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Drives the camera to [`desired_camera_pose`] with the PD law, reading
/// the current pose from the world's odometry each step.
pub fn run_coarse_phase(
    world: &mut World,
    task: &CoarseTask,
    calib: &HandEyeResult,
    gains: &GainConfig,
) -> Result<CoarsePhaseReport, ControlError> {
    gains.validate()?;
    let wall = Instant::now();
    let t_start = world.state.time;
    let desired = metric_pose(&desired_camera_pose(task, calib), &calib.scale);
    let mut position_errors = Vec::new();
    let mut angle_errors = Vec::new();
    let mut prev: Option<PbvsError> = None;
    let mut steps = 0;
    loop {
        let current = world.vo_camera_pose().ok_or(ControlError::NoOdometry)?;
        let err = pbvs_error(&metric_pose(&current, &calib.scale), &desired);
        position_errors.push(err.e_l.norm());
        angle_errors.push(err.angle());
        if err.e_l.norm() <= gains.coarse_position_tol && err.angle() <= gains.coarse_angle_tol {
            break;
        }
        if steps == gains.max_coarse_steps {
            return Err(ControlError::CoarseTimeout { steps, position_error_m: err.e_l.norm() });
        }
        let twist = pbvs_step(&err, prev.as_ref(), gains.dt, gains);
        world.step(&twist, gains.dt)?;
        prev = Some(err);
        steps += 1;
    }
    let vo = world.vo().ok_or(ControlError::NoOdometry)?;
    let target_base = vo.c0_point_to_base(&task.target_c0);
    let k = *world.intrinsics();
    let target_pixel = k.project(&world.camera_pose().inverse().transform_point(&target_base)).ok();
    Ok(CoarsePhaseReport {
        steps,
        position_error_m: *position_errors.last().unwrap_or(&0.0),
        angle_error_rad: *angle_errors.last().unwrap_or(&0.0),
        target_in_central_half: target_pixel.is_some_and(|p| k.in_central_half(&p)),
        target_pixel: target_pixel.map(|p| [p.x, p.y]),
        position_errors,
        angle_errors,
        sim_time_s: world.state.time - t_start,
        wall_time_s: wall.elapsed().as_secs_f64(),
    })
}

/// Source of the per-feature depths used in the interaction matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub enum DepthMode {
    /// Simulator depth, refreshed every step.
    #[default]
    GroundTruth,
    /// The depths given in the task, held fixed.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinePhaseReport {
    pub steps: usize,
    /// Raw (unaveraged) RMS pixel error at the last measurement.
    pub pixel_rms: f64,
    pub pixel_errors: Vec<f64>,
    /// Fingertip-to-target distance at the end, when a target was given.
    pub final_error_mm: Option<f64>,
    pub sim_time_s: f64,
    pub wall_time_s: f64,
}

impl FinePhaseReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// IBVS loop: track, step, repeat until the averaged pixel error is below
/// tolerance.
pub fn run_fine_phase(
    world: &mut World,
    task: &FineTask,
    gains: &GainConfig,
    depth_mode: DepthMode,
    target_base: Option<&Vector3<f64>>,
) -> Result<FinePhaseReport, ControlError> {
    gains.validate()?;
    let k = *world.intrinsics();
    task.validate(Some(&k))?;
    let wall = Instant::now();
    let t_start = world.state.time;
    let ids = task.ids();
    let mut current = task.clone();
    let mut history: Vec<Vec<Vector2<f64>>> = Vec::new();
    let mut pixel_errors = Vec::new();
    let mut steps = 0;
    loop {
        let px = world.track(&ids).map_err(ControlError::TrackingLost)?;
        for (pair, p) in current.pairs.iter_mut().zip(&px) {
            pair.current = *p;
        }
        if depth_mode == DepthMode::GroundTruth {
            for (d, &id) in current.depths.iter_mut().zip(&ids) {
                *d = world.depth(id).ok_or(ControlError::TrackingLost(id))?;
            }
        }
        let raw: Vec<Vector2<f64>> = current.pairs.iter().map(|p| p.current - p.desired).collect();
        pixel_errors.push(pixel_rms(raw.iter().copied()));
        history.push(raw);
        let window = &history[history.len().saturating_sub(gains.fine_window)..];
        let averaged = (0..ids.len()).map(|i| window.iter().map(|h| h[i]).sum::<Vector2<f64>>() / window.len() as f64);
        if pixel_rms(averaged) <= gains.fine_pixel_tol {
            break;
        }
        if steps == gains.max_fine_steps {
            return Err(ControlError::FineTimeout { steps, pixel_rms: *pixel_errors.last().unwrap() });
        }
        let twist = ibvs_step(&current, &k, gains)?;
        world.step(&twist, gains.dt)?;
        steps += 1;
    }
    Ok(FinePhaseReport {
        steps,
        pixel_rms: *pixel_errors.last().unwrap(),
        pixel_errors,
        final_error_mm: target_base.map(|t| world.final_error(t).error_mm),
        sim_time_s: world.state.time - t_start,
        wall_time_s: wall.elapsed().as_secs_f64(),
    })
}

/// Greedy farthest-point selection of up to `n` features, seeded with the
/// one farthest from the centroid. Ties go to the lower id.
pub fn spread_features(candidates: &[(u32, Vector2<f64>)], n: usize) -> Vec<u32> {
    if candidates.is_empty() || n == 0 {
        return Vec::new();
    }
    let centroid = candidates.iter().map(|c| c.1).sum::<Vector2<f64>>() / candidates.len() as f64;
    let first = candidates
        .iter()
        .max_by(|a, b| (a.1 - centroid).norm().total_cmp(&(b.1 - centroid).norm()).then(b.0.cmp(&a.0)))
        .unwrap();
    let mut chosen = vec![*first];
    while chosen.len() < n.min(candidates.len()) {
        let next = candidates
            .iter()
            .filter(|c| !chosen.iter().any(|k| k.0 == c.0))
            .max_by(|a, b| {
                let da = chosen.iter().map(|k| (k.1 - a.1).norm()).fold(f64::INFINITY, f64::min);
                let db = chosen.iter().map(|k| (k.1 - b.1).norm()).fold(f64::INFINITY, f64::min);
                da.total_cmp(&db).then(b.0.cmp(&a.0))
            })
            .unwrap();
        chosen.push(*next);
    }
    chosen.into_iter().map(|c| c.0).collect()
}
