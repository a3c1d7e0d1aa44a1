//! Core numerics for a coarse-to-fine semi-autonomous teleoperation system:
//! rigid-body geometry, hand-eye and scale calibration from visual odometry,
//! a simulated eye-in-hand workcell, and the PBVS/IBVS controllers.

pub mod calibration;
pub mod geometry;
pub mod controllers;
pub mod simworld;
