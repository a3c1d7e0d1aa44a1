//! Robot-side agent: explore, calibrate, then serve the coarse and fine
//! tasks the operator sends, reporting every phase change.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use nalgebra::{Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use teleop_core::calibration::{calibrate_with, CalibrationDataset, CalibrationError, CalibrationOptions, HandEyeResult, ScaleMatrix};
use teleop_core::controllers::{
    run_coarse_phase, run_fine_phase, CoarseTask, ControlError, DepthMode, FineTask, GainConfig, DEFAULT_STANDOFF,
};
use teleop_core::geometry::{Pose, Rotation};
use teleop_core::simworld::{
    exploration_trajectory, ExplorationConfig, MapPoint, Scene, SimError, VoConfig, World, WorldConfig, SUCCESS_THRESHOLD_MM,
};
use teleop_net::payload::{
    decode_coarse_task, decode_fine_task, decode_status, encode_map_points, encode_poses, encode_status, ImageBlob, PayloadError,
    StatusWire, WirePose, MAX_MAP_POINTS, MAX_POSES, STATUS_ABORT,
};
use teleop_net::{compute_stats, Datagram, Endpoint, MsgType, NetError};
use thiserror::Error;

use crate::convert::{f64x3, feature_pair, preset_to_rotation, wire_annotation, wire_point, wire_pose, InvalidPreset};
use crate::phase::RobotPhase;
use crate::report::{DirectionTotals, SessionReport};

#[derive(Debug, Error)]
pub enum RobotError {
    #[error("network: {0}")]
    Net(#[from] NetError),
    #[error("payload: {0}")]
    Payload(#[from] PayloadError),
    #[error("calibration: {0}")]
    Calibration(#[from] CalibrationError),
    #[error("control: {0}")]
    Control(#[from] ControlError),
    #[error("simulation: {0}")]
    Sim(#[from] SimError),
    #[error("task: {0}")]
    Preset(#[from] InvalidPreset),
    #[error("task: {0}")]
    Task(String),
    #[error("timeout waiting for {0}")]
    Timeout(&'static str),
    #[error("operator abort: {0}")]
    Abort(String),
    #[error("unknown scene target {0:?}")]
    UnknownTarget(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExplorationPlan {
    /// Spherical cap around the scene target.
    Sphere { radius: f64, n_poses: usize, cone_half_angle: f64 },
    /// Explicit end-effector waypoints.
    Waypoints(Vec<Pose>),
}

/// Deliberate calibration error, for robustness experiments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationPerturbation {
    /// Extra rotation of `b <- c0` about a seeded random axis.
    pub rotation_deg: f64,
    /// Multiplier on every scale entry.
    pub scale_factor: f64,
    pub seed: u64,
}

impl CalibrationPerturbation {
    pub fn apply(&self, calib: &HandEyeResult) -> HandEyeResult {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let axis = Unit::new_normalize(Vector3::new(
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
            rng.random::<f64>() - 0.5,
        ));
        let mut out = *calib;
        out.base_from_c0.rotation = calib.base_from_c0.rotation * Rotation::from_axis_angle(&axis, self.rotation_deg.to_radians());
        out.scale = ScaleMatrix::new(calib.scale.alpha * self.scale_factor);
        out
    }
}

#[derive(Debug, Clone)]
pub struct RobotAgentConfig {
    pub scene: Scene,
    /// Scene target used for exploration and for scoring the final error.
    pub target_name: String,
    pub world: WorldConfig,
    pub vo: VoConfig,
    pub exploration: ExplorationPlan,
    pub exploration_seed: u64,
    /// End-effector travel speed between exploration waypoints, m/s.
    pub explore_speed: f64,
    pub calibration: CalibrationOptions,
    pub perturbation: Option<CalibrationPerturbation>,
    pub gains: GainConfig,
    pub depth_mode: DepthMode,
    pub standoff: f64,
    /// Keyframes per MAP_POINTS/POSE batch.
    pub batch_keyframes: usize,
    /// `None` waits forever.
    pub await_timeout: Option<Duration>,
}

impl RobotAgentConfig {
    pub fn new(scene: Scene, target_name: &str, seed: u64) -> RobotAgentConfig {
        let defaults = ExplorationConfig::around(Vector3::zeros());
        RobotAgentConfig {
            scene,
            target_name: target_name.to_string(),
            world: WorldConfig { rng_seed: seed, ..Default::default() },
            vo: VoConfig::noiseless().with_seed(seed),
            exploration: ExplorationPlan::Sphere {
                radius: defaults.radius,
                n_poses: defaults.n_poses,
                cone_half_angle: defaults.cone_half_angle,
            },
            exploration_seed: seed,
            explore_speed: 0.1,
            calibration: CalibrationOptions::default(),
            perturbation: None,
            gains: GainConfig::default(),
            depth_mode: DepthMode::GroundTruth,
            standoff: DEFAULT_STANDOFF,
            batch_keyframes: 2,
            await_timeout: Some(Duration::from_secs(60)),
        }
    }
}

struct Agent<'a> {
    cfg: &'a RobotAgentConfig,
    ep: &'a Endpoint,
    phase: RobotPhase,
    report: SessionReport,
    deferred: VecDeque<Datagram>,
}

/// Runs the whole robot-side session over `endpoint` and reports on it.
/// Failures end the session in `FAILED` rather than returning an error.
pub fn run_robot_agent(cfg: &RobotAgentConfig, endpoint: &Endpoint) -> SessionReport {
    let wall = Instant::now();
    let mut agent = Agent {
        cfg,
        ep: endpoint,
        phase: RobotPhase::Idle,
        report: SessionReport { phases: vec![RobotPhase::Idle.name().into()], ..Default::default() },
        deferred: VecDeque::new(),
    };
    let mut world = None;
    let outcome = agent.run(&mut world);
    let target = cfg.scene.target(&cfg.target_name);
    if let (Some(w), Some(t)) = (&world, target) {
        agent.report.final_error_mm = Some(w.final_error(&t).error_mm);
    }
    match outcome {
        Ok(()) => {
            let detail = agent.report.final_error_mm.map(|e| format!("final_error_mm={e:.3}")).unwrap_or_default();
            if let Err(e) = agent.enter(RobotPhase::Done, &detail) {
                agent.fail(&e);
            }
        }
        Err(e) => agent.fail(&e),
    }
    let mut report = agent.report;
    report.success = agent.phase == RobotPhase::Done && report.final_error_mm.is_some_and(|e| e <= SUCCESS_THRESHOLD_MM);
    report.final_phase = agent.phase.name().to_string();
    report.robot_to_human = DirectionTotals::from_endpoint(endpoint);
    report.robot_delay = compute_stats(&endpoint.delay_log());
    report.wall_time_s = wall.elapsed().as_secs_f64();
    report
}

impl Agent<'_> {
    fn enter(&mut self, next: RobotPhase, detail: &str) -> Result<(), RobotError> {
        debug_assert!(self.phase.can_transition(&next), "{} -> {}", self.phase, next);
        self.phase = next;
        self.report.phases.push(self.phase.to_string());
        let status = StatusWire { phase: self.phase.code(), detail: detail.to_string() };
        self.ep.send_with_response(MsgType::Status, encode_status(&status))?;
        Ok(())
    }

    fn fail(&mut self, err: &RobotError) {
        let reason = err.to_string();
        self.report.failure = Some(reason.clone());
        self.phase = RobotPhase::Failed(reason.clone());
        self.report.phases.push(self.phase.to_string());
        // best effort: the link may be the reason we are failing
        let status = StatusWire { phase: self.phase.code(), detail: reason };
        let _ = self.ep.send_with_response(MsgType::Status, encode_status(&status));
    }

    fn send_points(&self, points: &[MapPoint]) -> Result<(), RobotError> {
        let wire: Vec<_> = points.iter().map(wire_point).collect();
        for batch in wire.chunks(MAX_MAP_POINTS) {
            self.ep.send_with_response(MsgType::MapPoints, encode_map_points(batch)?)?;
        }
        Ok(())
    }

    fn send_poses(&self, poses: &[WirePose]) -> Result<(), RobotError> {
        for batch in poses.chunks(MAX_POSES) {
            self.ep.send_with_response(MsgType::Pose, encode_poses(batch)?)?;
        }
        Ok(())
    }

    /// Next datagram of `kind` from the operator. Other task types that
    /// arrive early are kept for later; an abort ends the wait.
    fn await_datagram(&mut self, kind: MsgType, what: &'static str) -> Result<Datagram, RobotError> {
        if let Some(pos) = self.deferred.iter().position(|d| d.msg_type == kind) {
            return Ok(self.deferred.remove(pos).expect("index from position"));
        }
        let deadline = self.cfg.await_timeout.map(|t| Instant::now() + t);
        loop {
            let wait = match deadline {
                Some(d) => {
                    let now = Instant::now();
                    if now >= d {
                        return Err(RobotError::Timeout(what));
                    }
                    (d - now).min(Duration::from_millis(100))
                }
                None => Duration::from_millis(100),
            };
            let Some(d) = self.ep.recv(wait) else { continue };
            match d.msg_type {
                MsgType::Status => {
                    if let Ok(st) = decode_status(&d.payload) {
                        if st.phase == STATUS_ABORT {
                            return Err(RobotError::Abort(st.detail));
                        }
                    }
                }
                k if k == kind => return Ok(d),
                MsgType::TaskCoarse | MsgType::TaskFine => self.deferred.push_back(d),
                _ => {}
            }
        }
    }

    fn run(&mut self, world_slot: &mut Option<World>) -> Result<(), RobotError> {
        let cfg = self.cfg;
        let target = cfg.scene.target(&cfg.target_name).ok_or_else(|| RobotError::UnknownTarget(cfg.target_name.clone()))?;
        let poses = match &cfg.exploration {
            ExplorationPlan::Sphere { radius, n_poses, cone_half_angle } => {
                let ex = ExplorationConfig {
                    center: target,
                    radius: *radius,
                    n_poses: *n_poses,
                    cone_half_angle: *cone_half_angle,
                    rng_seed: cfg.exploration_seed,
                };
                exploration_trajectory(&ex, &cfg.world.ee_from_cam, &cfg.scene.workspace)?
            }
            ExplorationPlan::Waypoints(p) => p.clone(),
        };
        let first = *poses.first().ok_or_else(|| RobotError::Task("exploration has no waypoints".into()))?;

        self.enter(RobotPhase::Exploring, &format!("waypoints={}", poses.len()))?;
        let world = world_slot.insert(World::new(cfg.scene.clone(), cfg.world, first));
        let k = cfg.batch_keyframes.max(1);
        let mut pending_points = Vec::new();
        let mut pending_poses = Vec::new();
        let mut send_error = None;
        let mut points_sent = 0;
        let samples = world.explore(&poses, cfg.vo, cfg.explore_speed, |i, sample, fresh| {
            if send_error.is_some() {
                return;
            }
            pending_points.extend_from_slice(fresh);
            pending_poses.push(wire_pose(i as u32, &sample.cam_in_c0));
            if (i + 1) % k == 0 {
                points_sent += pending_points.len();
                send_error = self.send_points(&pending_points).and_then(|_| self.send_poses(&pending_poses)).err();
                pending_points.clear();
                pending_poses.clear();
            }
        })?;
        if let Some(e) = send_error {
            return Err(e);
        }
        if !pending_poses.is_empty() {
            points_sent += pending_points.len();
            self.send_points(&pending_points)?;
            self.send_poses(&pending_poses)?;
        }
        self.report.map_points_sent = points_sent;
        self.report.keyframes = samples.len();
        self.report.durations.exploration_s = world.state.time;

        self.enter(RobotPhase::Calibrating, &format!("samples={}", samples.len()))?;
        let mut calib = calibrate_with(&CalibrationDataset::new(samples)?, &cfg.calibration)?;
        self.report.calibration = Some(calib.residual_stats);
        if let Some(p) = &cfg.perturbation {
            calib = p.apply(&calib);
        }

        let rs = calib.residual_stats;
        self.enter(
            RobotPhase::AwaitCoarseTask,
            &format!("translation_rms_m={:.6} rotation_rms_rad={:.6}", rs.translation_rms_m, rs.rotation_rms_rad),
        )?;
        let d = self.await_datagram(MsgType::TaskCoarse, "coarse task")?;
        let wire = decode_coarse_task(&d.payload)?;
        let task = CoarseTask::new(f64x3(&wire.target), preset_to_rotation(wire.preset)?, cfg.standoff)?;

        self.enter(RobotPhase::CoarseMoving, &format!("preset={}", wire.preset))?;
        let coarse = run_coarse_phase(world, &task, &calib, &cfg.gains)?;
        self.report.coarse_steps = Some(coarse.steps);
        self.report.durations.coarse_s = coarse.sim_time_s;

        self.enter(
            RobotPhase::SendingImage,
            &format!("coarse_steps={} position_error_m={:.6} angle_error_rad={:.6}", coarse.steps, coarse.position_error_m, coarse.angle_error_rad),
        )?;
        let img = world.render();
        let blob = ImageBlob { pgm: img.to_pgm(), annotations: img.feature_annotations.iter().map(wire_annotation).collect() };
        let (w, h) = (u16::try_from(img.width), u16::try_from(img.height));
        let (Ok(w), Ok(h)) = (w, h) else { return Err(RobotError::Task("image too large for the wire format".into())) };
        for chunk in blob.chunks(1, w, h)? {
            self.ep.send_with_response(MsgType::ImageChunk, teleop_net::payload::encode_image_chunk(&chunk)?)?;
        }

        self.enter(RobotPhase::AwaitFineTask, &format!("annotations={}", blob.annotations.len()))?;
        let d = self.await_datagram(MsgType::TaskFine, "fine task")?;
        let pairs: Vec<_> = decode_fine_task(&d.payload)?.iter().map(feature_pair).collect();
        let depths = pairs
            .iter()
            .map(|p| world.depth(p.id).ok_or_else(|| RobotError::Task(format!("feature {} is not a known landmark", p.id))))
            .collect::<Result<Vec<_>, _>>()?;
        let fine_task = FineTask::new(pairs, depths)?;

        self.enter(RobotPhase::FineServoing, &format!("pairs={}", fine_task.pairs.len()))?;
        let fine = run_fine_phase(world, &fine_task, &cfg.gains, cfg.depth_mode, Some(&target))?;
        self.report.fine_steps = Some(fine.steps);
        self.report.durations.fine_s = fine.sim_time_s;
        Ok(())
    }
}
