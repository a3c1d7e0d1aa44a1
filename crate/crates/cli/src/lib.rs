//! Batch experiments, standalone robot and operator services, and offline
//! calibration behind the `teleop` binary.

pub mod calibrate;
pub mod experiment;
pub mod serve;

pub use calibrate::{calibrate_text, cmd_calibrate, CalibrationReport};
pub use experiment::{cmd_run, read_trials_csv, run_trials, ConfigError, ExperimentConfig, Perturbation, RunOutput, Scenario, Summary, TrialRow};
pub use serve::{serve_human, serve_robot, HumanServer, HumanSummary, ServeHumanOptions, ServeRobotOptions};
