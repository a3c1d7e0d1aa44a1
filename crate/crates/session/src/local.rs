//! Both agents in one process, connected by loopback UDP through the
//! impairment link.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use teleop_net::{compute_stats, DelayLogEntry, Endpoint, EndpointConfig, ImpairedTransport, ImpairmentConfig, UdpTransport};
use thiserror::Error;

use crate::gateway::Gateway;
use crate::operator::{run_scripted_operator, OperatorOutcome, OperatorPolicy};
use crate::report::{DirectionTotals, SessionReport};
use crate::robot::{run_robot_agent, RobotAgentConfig};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("transport setup: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Impairment(#[from] teleop_net::impair::ImpairmentError),
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub robot: RobotAgentConfig,
    pub operator: OperatorPolicy,
    /// Applied independently to each direction.
    pub impairment: ImpairmentConfig,
    /// Defaults to [`EndpointConfig::for_link`] of the impairment.
    pub endpoint: Option<EndpointConfig>,
    /// How long the operator keeps listening after the robot is done.
    pub operator_grace: Duration,
}

impl SessionConfig {
    pub fn new(robot: RobotAgentConfig, operator: OperatorPolicy) -> SessionConfig {
        SessionConfig { robot, operator, impairment: ImpairmentConfig::default(), endpoint: None, operator_grace: Duration::from_secs(5) }
    }

    pub fn endpoint_config(&self) -> EndpointConfig {
        self.endpoint.unwrap_or_else(|| EndpointConfig::for_link(self.impairment.one_way_latency, self.impairment.jitter))
    }
}

#[derive(Debug, Clone)]
pub struct LocalSessionOutcome {
    pub report: SessionReport,
    /// The gateway's point store at the end.
    pub point_store: BTreeMap<u32, [f32; 3]>,
    pub operator: OperatorOutcome,
    pub robot_log: Vec<DelayLogEntry>,
    pub human_log: Vec<DelayLogEntry>,
}

pub fn run_local_session(cfg: &SessionConfig) -> Result<LocalSessionOutcome, SessionError> {
    let robot_udp = UdpTransport::bind("127.0.0.1:0")?;
    let human_udp = UdpTransport::bind_to_peer("127.0.0.1:0", robot_udp.local_addr()?)?;
    robot_udp.set_peer(human_udp.local_addr()?);
    let robot_link = ImpairedTransport::new(robot_udp, cfg.impairment.for_direction(1))?;
    let human_link = ImpairedTransport::new(human_udp, cfg.impairment.for_direction(2))?;
    let ep_cfg = cfg.endpoint_config();

    let mut gateway = Gateway::start(Arc::new(human_link), ep_cfg);
    let events = gateway.subscribe();
    let stop = AtomicBool::new(false);
    let robot_ep = Endpoint::new(Arc::new(robot_link), ep_cfg);

    let (mut report, operator) = std::thread::scope(|s| {
        let handle = gateway.handle();
        let stop = &stop;
        let op = s.spawn(move || run_scripted_operator(&handle, events, &cfg.operator, stop, Duration::MAX / 4));
        let report = run_robot_agent(&cfg.robot, &robot_ep);
        // the robot is finished; give the operator time to see the final
        // STATUS, then stop it
        let grace = std::time::Instant::now() + cfg.operator_grace;
        while !op.is_finished() && std::time::Instant::now() < grace {
            std::thread::sleep(Duration::from_millis(10));
        }
        stop.store(true, Ordering::SeqCst);
        (report, op.join().expect("operator thread"))
    });

    let human_log = gateway.delay_log();
    report.human_to_robot = Some(DirectionTotals::from_endpoint(gateway.endpoint()));
    report.human_delay = Some(compute_stats(&human_log));
    let point_store = gateway.snapshot().points.clone();
    let robot_log = robot_ep.delay_log();
    gateway.shutdown();
    Ok(LocalSessionOutcome { report, point_store, operator, robot_log, human_log })
}
