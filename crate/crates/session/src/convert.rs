//! Conversions between controller types and their wire forms.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Vector2, Vector3};
use teleop_core::controllers::FeaturePair;
use teleop_core::geometry::{rot_x, rot_y, Pose, Rotation};
use teleop_core::simworld::{FeatureAnnotation, MapPoint};
use teleop_net::payload::{FinePairWire, WireAnnotation, WirePoint, WirePose, MAX_PRESET};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("orientation preset {0} is out of range 0..={MAX_PRESET}")]
pub struct InvalidPreset(pub u8);

/// Fixed base-frame end-effector orientations an operator can choose:
///
/// | preset | rotation     | tool axis (ee `z`) in `{b}` |
/// |--------|--------------|-----------------------------|
/// | 0      | `Rx(π)`      | `-z`, top-down              |
/// | 1      | `Ry(π/2)`    | `+x`, forward               |
/// | 2      | `Rx(π/2)`    | `-y`                        |
/// | 3      | `Rx(-π/2)`   | `+y`                        |
pub fn preset_to_rotation(preset: u8) -> Result<Rotation, InvalidPreset> {
    match preset {
        0 => Ok(rot_x(PI)),
        1 => Ok(rot_y(FRAC_PI_2)),
        2 => Ok(rot_x(FRAC_PI_2)),
        3 => Ok(rot_x(-FRAC_PI_2)),
        p => Err(InvalidPreset(p)),
    }
}

pub fn f32x3(v: &Vector3<f64>) -> [f32; 3] {
    [v.x as f32, v.y as f32, v.z as f32]
}

pub fn f64x3(v: &[f32; 3]) -> Vector3<f64> {
    Vector3::new(v[0] as f64, v[1] as f64, v[2] as f64)
}

pub fn wire_point(p: &MapPoint) -> WirePoint {
    WirePoint { id: p.id, xyz: f32x3(&p.position) }
}

pub fn wire_pose(keyframe: u32, cam_in_c0: &Pose) -> WirePose {
    let q = nalgebra::UnitQuaternion::from_rotation_matrix(&cam_in_c0.rotation).into_inner().coords;
    WirePose { keyframe, translation: f32x3(&cam_in_c0.translation), quaternion: [q.x as f32, q.y as f32, q.z as f32, q.w as f32] }
}

pub fn wire_annotation(a: &FeatureAnnotation) -> WireAnnotation {
    let px = a.pixel();
    WireAnnotation { id: a.id, u: px.x as f32, v: px.y as f32 }
}

pub fn feature_pair(w: &FinePairWire) -> FeaturePair {
    FeaturePair {
        id: w.feature_id,
        current: Vector2::new(w.u as f64, w.v as f64),
        desired: Vector2::new(w.u_star as f64, w.v_star as f64),
    }
}

pub fn fine_pair_wire(p: &FeaturePair) -> FinePairWire {
    FinePairWire {
        feature_id: p.id,
        u: p.current.x as f32,
        v: p.current.y as f32,
        u_star: p.desired.x as f32,
        v_star: p.desired.y as f32,
    }
}
