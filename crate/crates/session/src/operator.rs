//! Headless stand-in for the human operator.
//!
//! The policy knows the scene the way a person looking at the telepresence
//! view would: which landmark is the target and what the scene would look
//! like from the goal pose. It picks the target's map point for the coarse
//! task and, once the robot's image arrives, pairs each visible target
//! feature with where it would appear at the goal.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{Receiver, RecvTimeoutError};
use std::time::{Duration, Instant};

use nalgebra::Vector2;
use teleop_core::controllers::spread_features;
use teleop_core::geometry::Pose;
use teleop_core::simworld::{render_image, Scene, World, WorldConfig};
use teleop_net::payload::{encode_coarse_task, encode_fine_task, AssembledImage, CoarseTaskWire, FinePairWire};
use thiserror::Error;

use crate::convert::{preset_to_rotation, InvalidPreset};
use crate::gateway::{GatewayError, GatewayEvent, GatewayHandle};
use crate::phase::RobotPhase;

#[derive(Debug, Error)]
pub enum OperatorError {
    #[error("target {0:?} not found among received map points")]
    TargetNotFound(String),
    #[error("no map points received")]
    EmptyPointCloud,
    #[error("no image received before the fine task was requested")]
    NoImage,
    #[error("no target feature is visible in the received image")]
    NoFeatures,
    #[error(transparent)]
    Preset(#[from] InvalidPreset),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone)]
pub struct OperatorPolicy {
    pub scene: Scene,
    pub target_name: String,
    pub preset: u8,
    /// Camera model and mounting the operator assumes for the goal view.
    pub world: WorldConfig,
    pub max_pairs: usize,
}

impl OperatorPolicy {
    pub fn new(scene: Scene, target_name: &str, preset: u8) -> OperatorPolicy {
        OperatorPolicy { scene, target_name: target_name.to_string(), preset, world: WorldConfig::default(), max_pairs: 4 }
    }

    fn target_landmark(&self) -> Result<(nalgebra::Vector3<f64>, &teleop_core::simworld::Landmark), OperatorError> {
        let target = self.scene.target(&self.target_name).ok_or_else(|| OperatorError::TargetNotFound(self.target_name.clone()))?;
        let lm = self.scene.nearest_landmark(&target).ok_or_else(|| OperatorError::TargetNotFound(self.target_name.clone()))?;
        Ok((target, lm))
    }

    /// Coarse task aimed at the map point of the landmark nearest the target.
    pub fn plan_coarse(&self, points: &BTreeMap<u32, [f32; 3]>) -> Result<CoarseTaskWire, OperatorError> {
        if points.is_empty() {
            return Err(OperatorError::EmptyPointCloud);
        }
        preset_to_rotation(self.preset)?;
        let (_, lm) = self.target_landmark()?;
        let xyz = points.get(&lm.id).ok_or_else(|| OperatorError::TargetNotFound(self.target_name.clone()))?;
        Ok(CoarseTaskWire { target: *xyz, preset: self.preset })
    }

    /// Fine task: up to `max_pairs` well-spread target features, each sent to
    /// its pixel in the goal view.
    pub fn plan_fine(&self, image: &AssembledImage) -> Result<Vec<FinePairWire>, OperatorError> {
        let (target, lm) = self.target_landmark()?;
        let tag = lm.tag.clone();
        let rotation = preset_to_rotation(self.preset)?;
        let view = World::new(self.scene.clone(), self.world, Pose::identity());
        let goal = render_image(&self.scene, &view.goal_camera_pose(&target, &rotation), &self.world.intrinsics);
        let current: BTreeMap<u32, Vector2<f64>> =
            image.blob.annotations.iter().map(|a| (a.id, Vector2::new(a.u as f64, a.v as f64))).collect();
        let candidates: Vec<(u32, Vector2<f64>)> = goal
            .feature_annotations
            .iter()
            .filter(|a| current.contains_key(&a.id) && self.scene.landmark(a.id).is_some_and(|l| l.tag == tag))
            .map(|a| (a.id, a.pixel()))
            .collect();
        let ids = spread_features(&candidates, self.max_pairs);
        if ids.is_empty() {
            return Err(OperatorError::NoFeatures);
        }
        let desired: BTreeMap<u32, Vector2<f64>> = candidates.into_iter().collect();
        Ok(ids
            .iter()
            .map(|id| {
                let (c, d) = (current[id], desired[id]);
                FinePairWire { feature_id: *id, u: c.x as f32, v: c.y as f32, u_star: d.x as f32, v_star: d.y as f32 }
            })
            .collect())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OperatorOutcome {
    pub coarse_payload: Option<Vec<u8>>,
    pub fine_payload: Option<Vec<u8>>,
    pub aborted: Option<String>,
    pub final_phase: Option<RobotPhase>,
}

/// Reacts to gateway events until the robot reports a terminal phase, `stop`
/// is raised, or `timeout` passes. Planning failures abort the session.
pub fn run_scripted_operator(
    gateway: &GatewayHandle,
    events: Receiver<GatewayEvent>,
    policy: &OperatorPolicy,
    stop: &AtomicBool,
    timeout: Duration,
) -> OperatorOutcome {
    let deadline = Instant::now() + timeout;
    let mut out = OperatorOutcome::default();
    while !stop.load(Ordering::SeqCst) && Instant::now() < deadline {
        let ev = match events.recv_timeout(Duration::from_millis(50)) {
            Ok(ev) => ev,
            Err(RecvTimeoutError::Timeout) => continue,
            Err(RecvTimeoutError::Disconnected) => break,
        };
        let GatewayEvent::Status { phase, .. } = ev else { continue };
        let step = match &phase {
            RobotPhase::AwaitCoarseTask if out.coarse_payload.is_none() => policy.plan_coarse(&gateway.snapshot().points).and_then(|t| {
                out.coarse_payload = Some(encode_coarse_task(&t).map_err(GatewayError::from)?);
                gateway.send_coarse_task(&t)?;
                Ok(())
            }),
            RobotPhase::AwaitFineTask if out.fine_payload.is_none() => {
                let snap = gateway.snapshot();
                snap.image.as_deref().ok_or(OperatorError::NoImage).and_then(|img| policy.plan_fine(img)).and_then(|pairs| {
                    out.fine_payload = Some(encode_fine_task(&pairs).map_err(GatewayError::from)?);
                    gateway.send_fine_task(&pairs)?;
                    Ok(())
                })
            }
            p if p.is_terminal() => {
                out.final_phase = Some(phase);
                break;
            }
            _ => Ok(()),
        };
        if let Err(e) = step {
            let reason = e.to_string();
            let _ = gateway.abort(&reason);
            out.aborted = Some(reason);
        }
    }
    out
}
