use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use teleop_core::calibration::ResidualStats;
use teleop_net::{DelayStats, Endpoint};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeTotals {
    /// Distinct datagrams (retransmissions are not counted again).
    pub count: u64,
    /// Wire bytes, retransmissions included.
    pub bytes: u64,
}

/// Everything one side put on the wire.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DirectionTotals {
    pub count: u64,
    pub bytes: u64,
    pub by_type: BTreeMap<String, TypeTotals>,
}

impl DirectionTotals {
    /// Data datagrams from the sender's delay log plus the RESPONSE frames
    /// it generated.
    pub fn from_endpoint(ep: &Endpoint) -> DirectionTotals {
        let mut out = DirectionTotals::default();
        for e in ep.delay_log() {
            let t = out.by_type.entry(e.msg_type.name().to_string()).or_default();
            t.count += 1;
            t.bytes += e.size_bytes as u64;
        }
        let c = ep.counters();
        if c.responses_sent > 0 {
            out.by_type.insert("RESPONSE".into(), TypeTotals { count: c.responses_sent, bytes: c.response_bytes_sent });
        }
        out.count = out.by_type.values().map(|t| t.count).sum();
        out.bytes = out.by_type.values().map(|t| t.bytes).sum();
        out
    }
}

/// Simulated seconds spent in each motion phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseDurations {
    pub exploration_s: f64,
    pub coarse_s: f64,
    pub fine_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub success: bool,
    /// Name of the last phase reached.
    pub final_phase: String,
    pub failure: Option<String>,
    pub final_error_mm: Option<f64>,
    pub durations: PhaseDurations,
    pub phases: Vec<String>,
    pub map_points_sent: usize,
    pub keyframes: usize,
    pub calibration: Option<ResidualStats>,
    pub coarse_steps: Option<usize>,
    pub fine_steps: Option<usize>,
    pub robot_to_human: DirectionTotals,
    /// Filled in when the human side runs in the same process.
    pub human_to_robot: Option<DirectionTotals>,
    pub robot_delay: DelayStats,
    pub human_delay: Option<DelayStats>,
    pub wall_time_s: f64,
}

impl SessionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
