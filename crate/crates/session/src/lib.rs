//! The two long-running agents: the robot side (explore, calibrate, coarse
//! and fine servoing) and the human side (gateway, UI bridge, scripted
//! operator).

pub mod bridge;
pub mod convert;
pub mod gateway;
pub mod local;
pub mod operator;
pub mod phase;
pub mod report;
pub mod robot;

pub use bridge::{UiBridge, UiCommand, UiEvent};
pub use convert::{preset_to_rotation, InvalidPreset};
pub use gateway::{Gateway, GatewayEvent, GatewayHandle, Snapshot};
pub use local::{run_local_session, LocalSessionOutcome, SessionConfig, SessionError};
pub use operator::{run_scripted_operator, OperatorOutcome, OperatorPolicy};
pub use phase::RobotPhase;
pub use report::{DirectionTotals, PhaseDurations, SessionReport};
pub use robot::{run_robot_agent, CalibrationPerturbation, ExplorationPlan, RobotAgentConfig, RobotError};
