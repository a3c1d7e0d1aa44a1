//! Visual-odometry stand-in.
//!
//! Produces what a monocular feature-based odometry front end would report:
//! camera poses relative to the first keyframe `{c0}` and triangulated map
//! points, both with an unknown per-axis scale and optional noise.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::scene::Scene;
use crate::geometry::{random_small_rotation, CameraIntrinsics, Pose};

/// Minimum depth for a landmark to count as observed.
pub const NEAR_PLANE: f64 = 0.02;
/// Keyframes that must observe a landmark before it becomes a map point.
pub const MIN_OBSERVATIONS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoConfig {
    /// Odometry units per meter along each `{c0}` axis. The calibration
    /// ground truth `D` is the per-axis reciprocal.
    pub scale_per_axis: Vector3<f64>,
    /// Standard deviations of pose noise: (meters, radians).
    pub pose_noise_sigma: (f64, f64),
    /// Standard deviation of map-point noise, odometry units.
    pub point_noise_sigma: f64,
    pub keyframe_stride: usize,
    pub rng_seed: u64,
}

impl Default for VoConfig {
    fn default() -> Self {
        Self {
            scale_per_axis: Vector3::new(2.6, 2.4, 2.8),
            pose_noise_sigma: (1e-3, 2e-3),
            point_noise_sigma: 2e-3,
            keyframe_stride: 1,
            rng_seed: 0,
        }
    }
}

impl VoConfig {
    pub fn noiseless() -> Self {
        Self { pose_noise_sigma: (0.0, 0.0), point_noise_sigma: 0.0, ..Self::default() }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn is_valid(&self) -> bool {
        self.scale_per_axis.iter().all(|s| s.is_finite() && *s > 0.0)
            && self.pose_noise_sigma.0 >= 0.0
            && self.pose_noise_sigma.1 >= 0.0
            && self.point_noise_sigma >= 0.0
            && self.keyframe_stride >= 1
    }
}

/// Sparse landmark reconstructed by odometry, in `{c0}` odometry units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapPoint {
    pub id: u32,
    pub position: Vector3<f64>,
}

fn gaussian3(rng: &mut ChaCha8Rng, sigma: f64) -> Vector3<f64> {
    if sigma == 0.0 {
        return Vector3::zeros();
    }
    Vector3::new(rng.sample::<f64, _>(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)) * sigma
}

/// Pose tracker anchored at the true first camera pose.
#[derive(Debug, Clone)]
pub struct VisualOdometry {
    cfg: VoConfig,
    /// True `b <- c0`.
    base_from_c0: Pose,
    pose_rng: ChaCha8Rng,
}

impl VisualOdometry {
    pub fn new(cfg: VoConfig, first_cam_in_base: Pose) -> Self {
        Self { cfg, base_from_c0: first_cam_in_base, pose_rng: ChaCha8Rng::seed_from_u64(cfg.rng_seed) }
    }

    pub fn config(&self) -> &VoConfig {
        &self.cfg
    }

    /// Ground-truth `b <- c0` (not available to the robot's estimator).
    pub fn true_base_from_c0(&self) -> Pose {
        self.base_from_c0
    }

    /// Noise-free `c0 <- c` in odometry units.
    pub fn exact(&self, cam_in_base: &Pose) -> Pose {
        let rel = self.base_from_c0.inverse().compose(cam_in_base);
        Pose::new(rel.rotation, self.cfg.scale_per_axis.component_mul(&rel.translation))
    }

    /// Reported `c0 <- c`, with pose noise applied.
    pub fn observe(&mut self, cam_in_base: &Pose) -> Pose {
        let rel = self.base_from_c0.inverse().compose(cam_in_base);
        let (st, sr) = self.cfg.pose_noise_sigma;
        let t = rel.translation + gaussian3(&mut self.pose_rng, st);
        let r = rel.rotation * random_small_rotation(&mut self.pose_rng, sr);
        Pose::new(r, self.cfg.scale_per_axis.component_mul(&t))
    }

    /// Noise-free map position of a `{b}` point.
    pub fn point_to_c0(&self, p_base: &Vector3<f64>) -> Vector3<f64> {
        self.cfg.scale_per_axis.component_mul(&self.base_from_c0.inverse().transform_point(p_base))
    }

    /// Inverse of [`Self::point_to_c0`].
    pub fn c0_point_to_base(&self, p_c0: &Vector3<f64>) -> Vector3<f64> {
        self.base_from_c0.transform_point(&p_c0.component_div(&self.cfg.scale_per_axis))
    }
}

/// Incremental map: a landmark becomes a map point once
/// [`MIN_OBSERVATIONS`] keyframes have seen it inside the frustum.
#[derive(Debug, Clone)]
pub struct MapBuilder {
    intrinsics: CameraIntrinsics,
    observations: BTreeMap<u32, usize>,
    point_rng: ChaCha8Rng,
    point_sigma: f64,
    points: Vec<MapPoint>,
}

impl MapBuilder {
    pub fn new(cfg: &VoConfig, intrinsics: CameraIntrinsics) -> Self {
        Self {
            intrinsics,
            observations: BTreeMap::new(),
            point_rng: ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ 0x9E37_79B9_7F4A_7C15),
            point_sigma: cfg.point_noise_sigma,
            points: Vec::new(),
        }
    }

    /// Registers a keyframe taken at `cam_in_base` and returns the map points
    /// it completed, in ascending id order.
    pub fn add_keyframe(&mut self, vo: &VisualOdometry, cam_in_base: &Pose, scene: &Scene) -> Vec<MapPoint> {
        let base_to_cam = cam_in_base.inverse();
        let mut fresh = Vec::new();
        let mut visible: Vec<&super::scene::Landmark> = scene
            .landmarks
            .iter()
            .filter(|l| {
                let p = base_to_cam.transform_point(&l.position);
                p.z > NEAR_PLANE && self.intrinsics.project(&p).map(|px| self.intrinsics.contains(&px)).unwrap_or(false)
            })
            .collect();
        visible.sort_by_key(|l| l.id);
        for l in visible {
            let count = self.observations.entry(l.id).or_insert(0);
            *count += 1;
            if *count == MIN_OBSERVATIONS {
                let p = vo.point_to_c0(&l.position) + gaussian3(&mut self.point_rng, self.point_sigma);
                let mp = MapPoint { id: l.id, position: p };
                self.points.push(mp);
                fresh.push(mp);
            }
        }
        fresh
    }

    pub fn points(&self) -> &[MapPoint] {
        &self.points
    }
}

/// Camera side of a simulated odometry run.
#[derive(Debug, Clone, PartialEq)]
pub struct VoOutput {
    /// Indices into the input pose list that were used as keyframes.
    pub keyframe_indices: Vec<usize>,
    /// `c0 <- ci` per keyframe, odometry units.
    pub camera_poses: Vec<Pose>,
    pub map_points: Vec<MapPoint>,
}

/// Runs odometry over true camera poses in `{b}`. The first pose defines
/// `{c0}` and is reported as the identity.
pub fn simulate_vo(true_cam_poses: &[Pose], scene: &Scene, cfg: &VoConfig, intrinsics: &CameraIntrinsics) -> VoOutput {
    let mut out = VoOutput { keyframe_indices: Vec::new(), camera_poses: Vec::new(), map_points: Vec::new() };
    let Some(first) = true_cam_poses.first() else { return out };
    let mut vo = VisualOdometry::new(*cfg, *first);
    let mut map = MapBuilder::new(cfg, *intrinsics);
    for (i, pose) in true_cam_poses.iter().enumerate().step_by(cfg.keyframe_stride.max(1)) {
        let reported = if i == 0 { Pose::identity() } else { vo.observe(pose) };
        out.keyframe_indices.push(i);
        out.camera_poses.push(reported);
        map.add_keyframe(&vo, pose, scene);
    }
    out.map_points = map.points().to_vec();
    out
}
