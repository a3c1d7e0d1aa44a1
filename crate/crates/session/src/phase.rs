use std::fmt;

use serde::{Deserialize, Serialize};

/// Robot-side task phases, in the only order they may occur. Any phase
/// may drop to `Failed`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RobotPhase {
    Idle,
    Exploring,
    Calibrating,
    AwaitCoarseTask,
    CoarseMoving,
    SendingImage,
    AwaitFineTask,
    FineServoing,
    Done,
    Failed(String),
}

/// Wire code of `Failed` in STATUS datagrams; the reason travels as detail.
pub const FAILED_CODE: u8 = 9;

impl RobotPhase {
    pub const ORDER: [RobotPhase; 9] = [
        RobotPhase::Idle,
        RobotPhase::Exploring,
        RobotPhase::Calibrating,
        RobotPhase::AwaitCoarseTask,
        RobotPhase::CoarseMoving,
        RobotPhase::SendingImage,
        RobotPhase::AwaitFineTask,
        RobotPhase::FineServoing,
        RobotPhase::Done,
    ];

    pub fn code(&self) -> u8 {
        match self {
            RobotPhase::Idle => 0,
            RobotPhase::Exploring => 1,
            RobotPhase::Calibrating => 2,
            RobotPhase::AwaitCoarseTask => 3,
            RobotPhase::CoarseMoving => 4,
            RobotPhase::SendingImage => 5,
            RobotPhase::AwaitFineTask => 6,
            RobotPhase::FineServoing => 7,
            RobotPhase::Done => 8,
            RobotPhase::Failed(_) => FAILED_CODE,
        }
    }

    /// Inverse of [`Self::code`]; a failure code takes its reason from `detail`.
    pub fn from_code(code: u8, detail: &str) -> Option<RobotPhase> {
        if code == FAILED_CODE {
            return Some(RobotPhase::Failed(detail.to_string()));
        }
        Self::ORDER.get(code as usize).cloned()
    }

    pub fn name(&self) -> &'static str {
        match self {
            RobotPhase::Idle => "IDLE",
            RobotPhase::Exploring => "EXPLORING",
            RobotPhase::Calibrating => "CALIBRATING",
            RobotPhase::AwaitCoarseTask => "AWAIT_COARSE_TASK",
            RobotPhase::CoarseMoving => "COARSE_MOVING",
            RobotPhase::SendingImage => "SENDING_IMAGE",
            RobotPhase::AwaitFineTask => "AWAIT_FINE_TASK",
            RobotPhase::FineServoing => "FINE_SERVOING",
            RobotPhase::Done => "DONE",
            RobotPhase::Failed(_) => "FAILED",
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, RobotPhase::Done | RobotPhase::Failed(_))
    }

    /// Only the next phase in order, or `Failed` from a non-terminal phase.
    pub fn can_transition(&self, to: &RobotPhase) -> bool {
        if self.is_terminal() {
            return false;
        }
        match to {
            RobotPhase::Failed(_) => true,
            _ => to.code() == self.code() + 1,
        }
    }
}

impl fmt::Display for RobotPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RobotPhase::Failed(reason) => write!(f, "FAILED({reason})"),
            p => f.write_str(p.name()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn forward_chain_is_the_only_path() {
        for w in RobotPhase::ORDER.windows(2) {
            assert!(w[0].can_transition(&w[1]));
            assert!(!w[1].can_transition(&w[0]));
        }
        assert!(!RobotPhase::Idle.can_transition(&RobotPhase::Calibrating));
        assert!(RobotPhase::CoarseMoving.can_transition(&RobotPhase::Failed("x".into())));
        assert!(!RobotPhase::Done.can_transition(&RobotPhase::Failed("x".into())));
        assert!(!RobotPhase::Failed("a".into()).can_transition(&RobotPhase::Idle));
    }

    #[test]
    fn codes_round_trip() {
        for p in RobotPhase::ORDER {
            assert_eq!(RobotPhase::from_code(p.code(), ""), Some(p.clone()));
        }
        assert_eq!(RobotPhase::from_code(FAILED_CODE, "timeout"), Some(RobotPhase::Failed("timeout".into())));
        assert_eq!(RobotPhase::from_code(42, ""), None);
        assert_eq!(RobotPhase::Failed("calibration".into()).to_string(), "FAILED(calibration)");
    }

    proptest! {
        #[test]
        fn accepted_walks_never_go_backwards(steps in proptest::collection::vec(0u8..10, 1..30)) {
            let mut phase = RobotPhase::Idle;
            for s in steps {
                let next = RobotPhase::from_code(s, "r").unwrap();
                if phase.can_transition(&next) {
                    prop_assert!(next.code() > phase.code());
                    phase = next;
                }
            }
        }
    }
}
