//! Batch trials with the scripted operator and their report files.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use teleop_core::controllers::GainConfig;
use teleop_core::simworld::{Scene, VoConfig};
use teleop_net::{compute_stats, DelayLogEntry, DelayStats, EndpointConfig, ImpairmentConfig};
use teleop_session::{run_local_session, CalibrationPerturbation, OperatorPolicy, RobotAgentConfig, SessionConfig};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
#[error("config error: {0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    HoldHandler,
    PressButton,
}

impl Scenario {
    pub fn parse(name: &str) -> Result<Scenario, ConfigError> {
        match name {
            "hold_handler" => Ok(Scenario::HoldHandler),
            "press_button" => Ok(Scenario::PressButton),
            other => Err(ConfigError(format!("unknown scenario {other:?} (expected hold_handler or press_button)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::HoldHandler => "hold_handler",
            Scenario::PressButton => "press_button",
        }
    }

    pub fn scene(&self) -> Scene {
        match self {
            Scenario::HoldHandler => Scene::handle(),
            Scenario::PressButton => Scene::button(),
        }
    }

    pub fn target_name(&self) -> &'static str {
        match self {
            Scenario::HoldHandler => "handle_grasp",
            Scenario::PressButton => "button_center",
        }
    }

    /// The handle is grasped from the front, the button pressed from above.
    pub fn preset(&self) -> u8 {
        match self {
            Scenario::HoldHandler => 1,
            Scenario::PressButton => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub rotation_deg: f64,
    pub scale_factor: f64,
}

/// Everything a batch run needs. Missing fields in a config file take the
/// defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: String,
    pub trials: usize,
    /// One per trial. Empty means `base_seed..base_seed + trials`.
    pub seeds: Vec<u64>,
    pub base_seed: u64,
    pub impairment: ImpairmentConfig,
    pub vo_noise: bool,
    /// Standard deviation of tracked-pixel noise, 0 for none.
    pub pixel_noise: f64,
    pub gains: GainConfig,
    pub perturbation: Option<Perturbation>,
    pub out_dir: PathBuf,
    pub parallel: usize,
    /// Overrides the link-derived retransmission timeout.
    pub retransmit_timeout_ms: Option<u64>,
    pub max_retries: Option<u32>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: "press_button".into(),
            trials: 10,
            seeds: Vec::new(),
            base_seed: 0,
            impairment: ImpairmentConfig::default(),
            vo_noise: false,
            pixel_noise: 0.0,
            gains: GainConfig::default(),
            perturbation: None,
            out_dir: PathBuf::from("out"),
            parallel: 1,
            retransmit_timeout_ms: None,
            max_retries: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> anyhow::Result<ExperimentConfig> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn seed_list(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            (0..self.trials as u64).map(|i| self.base_seed + i).collect()
        } else {
            self.seeds.clone()
        }
    }

    pub fn validate(&self) -> Result<Scenario, ConfigError> {
        let scenario = Scenario::parse(&self.scenario)?;
        if self.trials == 0 {
            return Err(ConfigError("trials must be at least 1".into()));
        }
        if !self.seeds.is_empty() && self.seeds.len() != self.trials {
            return Err(ConfigError(format!("{} seeds given for {} trials", self.seeds.len(), self.trials)));
        }
        self.impairment.validate().map_err(|e| ConfigError(e.to_string()))?;
        self.gains.validate().map_err(|e| ConfigError(e.to_string()))?;
        if !(self.pixel_noise >= 0.0) {
            return Err(ConfigError("pixel noise must be non-negative".into()));
        }
        if let Some(p) = &self.perturbation {
            if !(p.scale_factor > 0.0) || !p.rotation_deg.is_finite() {
                return Err(ConfigError("perturbation needs a positive scale factor and a finite angle".into()));
            }
        }
        Ok(scenario)
    }

    fn endpoint_config(&self) -> Option<EndpointConfig> {
        if self.retransmit_timeout_ms.is_none() && self.max_retries.is_none() {
            return None;
        }
        let base = EndpointConfig::for_link(self.impairment.one_way_latency, self.impairment.jitter);
        Some(EndpointConfig {
            timeout: self.retransmit_timeout_ms.map(Duration::from_millis).unwrap_or(base.timeout),
            max_retries: self.max_retries.unwrap_or(base.max_retries),
            ..base
        })
    }

    /// Session setup of one trial.
    pub fn session_config(&self, scenario: Scenario, seed: u64) -> SessionConfig {
        let scene = scenario.scene();
        let mut robot = RobotAgentConfig::new(scene.clone(), scenario.target_name(), seed);
        robot.vo = if self.vo_noise { VoConfig::default() } else { VoConfig::noiseless() }.with_seed(seed);
        robot.world.pixel_noise_sigma = self.pixel_noise;
        robot.gains = self.gains;
        robot.perturbation =
            self.perturbation.map(|p| CalibrationPerturbation { rotation_deg: p.rotation_deg, scale_factor: p.scale_factor, seed });
        let mut operator = OperatorPolicy::new(scene, scenario.target_name(), scenario.preset());
        operator.world = robot.world;
        let mut session = SessionConfig::new(robot, operator);
        session.impairment = ImpairmentConfig { rng_seed: self.impairment.rng_seed.wrapping_add(seed), ..self.impairment };
        session.endpoint = self.endpoint_config();
        session
    }
}

/// One row of `trials.csv`. The last two columns depend on wall-clock
/// timing; everything before them is a function of the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub seed: u64,
    pub success: bool,
    pub final_phase: String,
    pub final_error_mm: Option<f64>,
    pub exploration_s: f64,
    pub coarse_s: f64,
    pub fine_s: f64,
    pub robot_to_human_datagrams: u64,
    pub robot_to_human_bytes: u64,
    pub human_to_robot_datagrams: u64,
    pub human_to_robot_bytes: u64,
    pub map_points: usize,
    pub failure: String,
    pub ms_per_kb: f64,
    pub wall_s: f64,
}

/// Number of trailing wall-clock columns in [`TrialRow`].
pub const WALL_CLOCK_COLUMNS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayRow {
    pub seed: u64,
    pub direction: String,
    pub datagram_id: u32,
    #[serde(rename = "type")]
    pub msg_type: String,
    pub size_bytes: usize,
    pub t_sent: f64,
    pub t_resp: Option<f64>,
    pub rtt_ms: Option<f64>,
}

impl DelayRow {
    fn new(seed: u64, direction: &str, e: &DelayLogEntry) -> DelayRow {
        DelayRow {
            seed,
            direction: direction.into(),
            datagram_id: e.datagram_id,
            msg_type: e.msg_type.name().into(),
            size_bytes: e.size_bytes,
            t_sent: e.t_sent,
            t_resp: e.t_response_received,
            rtt_ms: e.rtt().map(|r| r * 1000.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub row: TrialRow,
    pub delays: Vec<DelayLogEntry>,
    pub delay_rows: Vec<DelayRow>,
}

pub fn run_trial(cfg: &ExperimentConfig, scenario: Scenario, seed: u64) -> anyhow::Result<TrialOutcome> {
    let out = run_local_session(&cfg.session_config(scenario, seed)).with_context(|| format!("trial with seed {seed}"))?;
    let r = &out.report;
    let human = r.human_to_robot.clone().unwrap_or_default();
    let mut delays = out.robot_log.clone();
    delays.extend(out.human_log.iter().cloned());
    let delay_rows = out
        .robot_log
        .iter()
        .map(|e| DelayRow::new(seed, "robot_to_human", e))
        .chain(out.human_log.iter().map(|e| DelayRow::new(seed, "human_to_robot", e)))
        .collect();
    let row = TrialRow {
        seed,
        success: r.success,
        final_phase: r.final_phase.clone(),
        final_error_mm: r.final_error_mm,
        exploration_s: r.durations.exploration_s,
        coarse_s: r.durations.coarse_s,
        fine_s: r.durations.fine_s,
        robot_to_human_datagrams: r.robot_to_human.count,
        robot_to_human_bytes: r.robot_to_human.bytes,
        human_to_robot_datagrams: human.count,
        human_to_robot_bytes: human.bytes,
        map_points: out.point_store.len(),
        failure: r.failure.clone().unwrap_or_default(),
        ms_per_kb: compute_stats(&delays).ms_per_kb,
        wall_s: r.wall_time_s,
    };
    Ok(TrialOutcome { row, delays, delay_rows })
}

/// Runs every trial, `parallel` at a time. Results keep seed order.
pub fn run_trials(cfg: &ExperimentConfig) -> anyhow::Result<Vec<TrialOutcome>> {
    let scenario = cfg.validate()?;
    let seeds = cfg.seed_list();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<anyhow::Result<TrialOutcome>>>> = Mutex::new((0..seeds.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..cfg.parallel.clamp(1, seeds.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&seed) = seeds.get(i) else { break };
                let outcome = run_trial(cfg, scenario, seed);
                slots.lock().unwrap()[i] = Some(outcome);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(|o| o.expect("every trial ran")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub scenario: String,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Over trials that produced a final error.
    pub mean_final_error_mm: Option<f64>,
    pub mean_exploration_s: f64,
    pub mean_coarse_s: f64,
    pub mean_fine_s: f64,
    pub mean_robot_to_human_bytes: f64,
    pub mean_human_to_robot_bytes: f64,
    /// Over every datagram of every trial, both directions.
    pub delay: DelayStats,
}

impl Summary {
    /// Aggregates computed from the trial rows alone (plus the delay log).
    pub fn from_rows(scenario: &str, rows: &[TrialRow], delays: &[DelayLogEntry]) -> Summary {
        let n = rows.len().max(1) as f64;
        let mean = |f: &dyn Fn(&TrialRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let errors: Vec<f64> = rows.iter().filter_map(|r| r.final_error_mm).collect();
        let successes = rows.iter().filter(|r| r.success).count();
        Summary {
            scenario: scenario.to_string(),
            trials: rows.len(),
            successes,
            success_rate: successes as f64 / n,
            mean_final_error_mm: (!errors.is_empty()).then(|| errors.iter().sum::<f64>() / errors.len() as f64),
            mean_exploration_s: mean(&|r| r.exploration_s),
            mean_coarse_s: mean(&|r| r.coarse_s),
            mean_fine_s: mean(&|r| r.fine_s),
            mean_robot_to_human_bytes: mean(&|r| r.robot_to_human_bytes as f64),
            mean_human_to_robot_bytes: mean(&|r| r.human_to_robot_bytes as f64),
            delay: compute_stats(delays),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub rows: Vec<TrialRow>,
    pub summary: Summary,
    pub trials_csv: PathBuf,
    pub summary_json: PathBuf,
    pub delays_csv: PathBuf,
}

/// Runs the batch and writes `trials.csv`, `summary.json` and `delays.csv`
/// into the output directory.
pub fn cmd_run(cfg: &ExperimentConfig) -> anyhow::Result<RunOutput> {
    let scenario = cfg.validate()?;
    let outcomes = run_trials(cfg)?;
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let rows: Vec<TrialRow> = outcomes.iter().map(|o| o.row.clone()).collect();
    let delays: Vec<DelayLogEntry> = outcomes.iter().flat_map(|o| o.delays.iter().cloned()).collect();
    let summary = Summary::from_rows(scenario.name(), &rows, &delays);

    let trials_csv = cfg.out_dir.join("trials.csv");
    write_csv(&trials_csv, &rows)?;
    let delays_csv = cfg.out_dir.join("delays.csv");
    let delay_rows: Vec<&DelayRow> = outcomes.iter().flat_map(|o| o.delay_rows.iter()).collect();
    write_csv(&delays_csv, &delay_rows)?;
    let summary_json = cfg.out_dir.join("summary.json");
    fs::write(&summary_json, serde_json::to_string_pretty(&summary)? + "\n").with_context(|| format!("writing {}", summary_json.display()))?;
    Ok(RunOutput { rows, summary, trials_csv, summary_json, delays_csv })
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trials_csv(path: &Path) -> anyhow::Result<Vec<TrialRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// `trials.csv` text with the wall-clock columns cut off each line.
pub fn deterministic_trials_text(csv_text: &str) -> String {
    csv_text
        .lines()
        .map(|l| {
            let fields: Vec<&str> = l.split(',').collect();
            fields[..fields.len().saturating_sub(WALL_CLOCK_COLUMNS)].join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_trials_is_a_config_error() {
        let cfg = ExperimentConfig { trials: 0, ..Default::default() };
        assert_eq!(cfg.validate(), Err(ConfigError("trials must be at least 1".into())));
    }

    #[test]
    fn unknown_scenario_is_a_config_error() {
        let cfg = ExperimentConfig { scenario: "juggle".into(), ..Default::default() };
        assert!(cfg.validate().unwrap_err().0.contains("juggle"));
    }

    #[test]
    fn seed_count_must_match_trials() {
        let cfg = ExperimentConfig { trials: 3, seeds: vec![1, 2], ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig { trials: 3, base_seed: 10, ..Default::default() };
        assert_eq!(cfg.seed_list(), vec![10, 11, 12]);
    }

    #[test]
    fn partial_config_file_uses_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"scenario":"hold_handler","trials":2}"#).unwrap();
        assert_eq!(cfg.validate(), Ok(Scenario::HoldHandler));
        assert_eq!(cfg.parallel, 1);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"trails":2}"#).is_err());
    }

    #[test]
    fn scenarios_map_to_scene_targets() {
        for s in [Scenario::HoldHandler, Scenario::PressButton] {
            assert_eq!(Scenario::parse(s.name()), Ok(s));
            assert!(s.scene().target(s.target_name()).is_some());
        }
    }

    #[test]
    fn wall_clock_columns_are_stripped() {
        let text = "a,b,ms_per_kb,wall_s\n1,2,3.5,0.25";
        assert_eq!(deterministic_trials_text(text), "a,b\n1,2");
    }

    #[test]
    fn summary_from_rows() {
        let row = |seed, success, err: Option<f64>| TrialRow {
            seed,
            success,
            final_phase: "DONE".into(),
            final_error_mm: err,
            exploration_s: 10.0,
            coarse_s: 2.0,
            fine_s: 1.0,
            robot_to_human_datagrams: 10,
            robot_to_human_bytes: 1000,
            human_to_robot_datagrams: 12,
            human_to_robot_bytes: 300,
            map_points: 40,
            failure: String::new(),
            ms_per_kb: 0.0,
            wall_s: 0.0,
        };
        let s = Summary::from_rows("press_button", &[row(0, true, Some(2.0)), row(1, false, Some(14.0)), row(2, false, None)], &[]);
        assert_eq!((s.trials, s.successes), (3, 1));
        assert!((s.success_rate - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.mean_final_error_mm, Some(8.0));
        assert_eq!(s.mean_robot_to_human_bytes, 1000.0);
    }
}
