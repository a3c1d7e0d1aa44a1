//! Line-oriented dataset files.
//!
//! One sample per line:
//!
//! ```text
//! i tx ty tz qx qy qz qw TX TY TZ QX QY QZ QW
//! ```
//!
//! The lowercase block is the camera pose `c0 <- ci`, the uppercase block the
//! end-effector pose `b <- ei`. Quaternions are written normalized. Blank
//! lines and `#` comments are ignored.

use std::fmt::Write as _;

use nalgebra::Vector3;
use thiserror::Error;

use super::{CalibrationDataset, CalibrationError, CalibrationSample};
use crate::geometry::Pose;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetFileError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Invalid(#[from] CalibrationError),
}

const FIELDS: usize = 15;

fn parse_line(line_no: usize, text: &str) -> Result<CalibrationSample, DatasetFileError> {
    let err = |reason: String| DatasetFileError::Parse { line: line_no, reason };
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.len() != FIELDS {
        return Err(err(format!("expected {FIELDS} fields, found {}", tokens.len())));
    }
    tokens[0].parse::<u64>().map_err(|e| err(format!("bad sample index {:?}: {e}", tokens[0])))?;
    let mut v = [0.0f64; FIELDS - 1];
    for (slot, tok) in v.iter_mut().zip(&tokens[1..]) {
        *slot = tok.parse::<f64>().map_err(|e| err(format!("bad number {tok:?}: {e}")))?;
        if !slot.is_finite() {
            return Err(err(format!("non-finite value {tok:?}")));
        }
    }
    let pose = |o: usize| -> Result<Pose, DatasetFileError> {
        let q = [v[o + 3], v[o + 4], v[o + 5], v[o + 6]];
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-12 {
            return Err(err("zero-length quaternion".into()));
        }
        Ok(Pose::from_translation_quaternion(Vector3::new(v[o], v[o + 1], v[o + 2]), q))
    };
    Ok(CalibrationSample { cam_in_c0: pose(0)?, ee_in_base: pose(7)? })
}

/// Parses samples without enforcing the dataset size minimum.
pub fn parse_samples(text: &str) -> Result<Vec<CalibrationSample>, DatasetFileError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        out.push(parse_line(idx + 1, line)?);
    }
    Ok(out)
}

pub fn parse_dataset(text: &str) -> Result<CalibrationDataset, DatasetFileError> {
    Ok(CalibrationDataset::new(parse_samples(text)?)?)
}

pub fn write_dataset(dataset: &CalibrationDataset) -> String {
    let mut out = String::from("# i tx ty tz qx qy qz qw TX TY TZ QX QY QZ QW\n");
    for (i, s) in dataset.samples().iter().enumerate() {
        let _ = write!(out, "{i}");
        for p in [&s.cam_in_c0, &s.ee_in_base] {
            let t = p.translation;
            let q = p.quaternion_xyzw();
            for x in [t.x, t.y, t.z, q[0], q[1], q[2], q[3]] {
                // shortest representation that round-trips exactly
                let _ = write!(out, " {x:?}");
            }
        }
        out.push('\n');
    }
    out
}
