//! Offline hand-eye calibration of a dataset file.

use std::fs;
use std::path::Path;

use anyhow::Context;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use teleop_core::calibration::io::parse_dataset;
use teleop_core::calibration::{calibrate_with, CalibrationOptions, HandEyeResult, ResidualStats};
use teleop_core::geometry::{Pose, Rotation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationReport {
    /// Row-major.
    pub matrix: [[f64; 3]; 3],
    pub quaternion_xyzw: [f64; 4],
}

impl RotationReport {
    fn new(r: &Rotation) -> RotationReport {
        let m = r.matrix();
        RotationReport {
            matrix: std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)])),
            quaternion_xyzw: Pose::new(*r, Vector3::zeros()).quaternion_xyzw(),
        }
    }
}

/// Printable view of a [`HandEyeResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub samples: usize,
    pub base_from_c0_rotation: RotationReport,
    /// Meters.
    pub base_from_c0_translation: [f64; 3],
    /// Meters per odometry unit along each axis of {c0}.
    pub scale: [f64; 3],
    pub ee_from_cam_rotation: RotationReport,
    pub t0: [f64; 3],
    pub residuals: ResidualStats,
}

impl CalibrationReport {
    pub fn new(samples: usize, r: &HandEyeResult) -> CalibrationReport {
        let v = |v: &Vector3<f64>| [v.x, v.y, v.z];
        CalibrationReport {
            samples,
            base_from_c0_rotation: RotationReport::new(&r.base_from_c0.rotation),
            base_from_c0_translation: v(&r.base_from_c0.translation),
            scale: v(&r.scale.alpha),
            ee_from_cam_rotation: RotationReport::new(&r.ee_from_cam_rotation()),
            t0: v(&r.t0),
            residuals: r.residual_stats,
        }
    }
}

pub fn calibrate_text(text: &str, opts: &CalibrationOptions) -> anyhow::Result<CalibrationReport> {
    let dataset = parse_dataset(text)?;
    let result = calibrate_with(&dataset, opts)?;
    Ok(CalibrationReport::new(dataset.len(), &result))
}

pub fn cmd_calibrate(path: &Path, opts: &CalibrationOptions) -> anyhow::Result<CalibrationReport> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    calibrate_text(&text, opts).with_context(|| format!("calibrating {}", path.display()))
}
