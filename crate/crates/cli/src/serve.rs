//! The two halves of a session as separate processes talking UDP.

use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::Context;
use serde::Serialize;
use teleop_core::controllers::GainConfig;
use teleop_core::simworld::{Scene, VoConfig};
use teleop_net::{DelayStats, Endpoint, EndpointConfig, ImpairedTransport, ImpairmentConfig, UdpTransport};
use teleop_session::{
    run_robot_agent, run_scripted_operator, CalibrationPerturbation, Gateway, OperatorPolicy, RobotAgentConfig, SessionReport, UiBridge,
};

use crate::experiment::Scenario;

#[derive(Debug, Clone)]
pub struct ServeRobotOptions {
    pub scene: Scene,
    pub target_name: String,
    pub bind: String,
    pub peer: String,
    pub impairment: ImpairmentConfig,
    pub endpoint: EndpointConfig,
    pub seed: u64,
    pub vo_noise: bool,
    pub pixel_noise: f64,
    pub gains: GainConfig,
    pub perturbation: Option<(f64, f64)>,
    /// `None` waits for the operator indefinitely.
    pub await_timeout: Option<Duration>,
}

impl ServeRobotOptions {
    pub fn new(scenario: Scenario, bind: impl Into<String>, peer: impl Into<String>) -> ServeRobotOptions {
        let link = ImpairmentConfig::default();
        ServeRobotOptions {
            scene: scenario.scene(),
            target_name: scenario.target_name().into(),
            bind: bind.into(),
            peer: peer.into(),
            impairment: link,
            // an operator that starts late only costs retransmissions
            endpoint: EndpointConfig { max_retries: u32::MAX, ..EndpointConfig::for_link(link.one_way_latency, link.jitter) },
            seed: 0,
            vo_noise: false,
            pixel_noise: 0.0,
            gains: GainConfig::default(),
            perturbation: None,
            await_timeout: None,
        }
    }

    fn agent_config(&self) -> RobotAgentConfig {
        let mut cfg = RobotAgentConfig::new(self.scene.clone(), &self.target_name, self.seed);
        cfg.vo = if self.vo_noise { VoConfig::default() } else { VoConfig::noiseless() }.with_seed(self.seed);
        cfg.world.pixel_noise_sigma = self.pixel_noise;
        cfg.gains = self.gains;
        cfg.perturbation = self.perturbation.map(|(rotation_deg, scale_factor)| CalibrationPerturbation { rotation_deg, scale_factor, seed: self.seed });
        cfg.await_timeout = self.await_timeout;
        cfg
    }
}

/// Binds the robot port and runs one session to completion.
pub fn serve_robot(opts: &ServeRobotOptions) -> anyhow::Result<SessionReport> {
    let agent = opts.agent_config();
    agent.gains.validate()?;
    let udp = UdpTransport::bind_to_peer(&opts.bind, &opts.peer).with_context(|| format!("binding robot socket {} (peer {})", opts.bind, opts.peer))?;
    let link = ImpairedTransport::new(udp, opts.impairment.for_direction(1))?;
    let endpoint = Endpoint::new(Arc::new(link), opts.endpoint);
    Ok(run_robot_agent(&agent, &endpoint))
}

#[derive(Debug, Clone)]
pub struct ServeHumanOptions {
    pub bind: String,
    /// Learned from the first datagram when absent.
    pub peer: Option<String>,
    pub ui: Option<String>,
    /// Plan tasks automatically instead of waiting for UI commands.
    pub scripted: Option<Scenario>,
    pub impairment: ImpairmentConfig,
    pub endpoint: EndpointConfig,
    /// Time to keep answering after the robot reports a terminal phase.
    pub linger: Duration,
}

impl ServeHumanOptions {
    pub fn new(bind: impl Into<String>) -> ServeHumanOptions {
        ServeHumanOptions {
            bind: bind.into(),
            peer: None,
            ui: None,
            scripted: None,
            impairment: ImpairmentConfig::default(),
            endpoint: EndpointConfig::default(),
            linger: Duration::from_secs(1),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HumanSummary {
    pub final_phase: Option<String>,
    pub detail: String,
    pub map_points: usize,
    pub aborted: Option<String>,
    pub delay: DelayStats,
}

/// Started human side. Dropping it stops the bridge and the gateway.
pub struct HumanServer {
    gateway: Gateway,
    bridge: Option<UiBridge>,
    opts: ServeHumanOptions,
}

impl HumanServer {
    pub fn start(opts: ServeHumanOptions) -> anyhow::Result<HumanServer> {
        let udp = match &opts.peer {
            Some(peer) => UdpTransport::bind_to_peer(&opts.bind, peer),
            None => UdpTransport::bind(&opts.bind),
        }
        .with_context(|| format!("binding human socket {}", opts.bind))?;
        let link = ImpairedTransport::new(udp, opts.impairment.for_direction(2))?;
        let gateway = Gateway::start(Arc::new(link), opts.endpoint);
        let bridge = match &opts.ui {
            Some(addr) => Some(UiBridge::start(gateway.handle(), addr.as_str()).with_context(|| format!("binding UI socket {addr}"))?),
            None => None,
        };
        Ok(HumanServer { gateway, bridge, opts })
    }

    pub fn ui_addr(&self) -> Option<std::net::SocketAddr> {
        self.bridge.as_ref().map(|b| b.local_addr())
    }

    /// Serves until the robot reports a terminal phase.
    pub fn run(self) -> HumanSummary {
        let mut aborted = None;
        if let Some(scenario) = self.opts.scripted {
            let policy = OperatorPolicy::new(scenario.scene(), scenario.target_name(), scenario.preset());
            let stop = AtomicBool::new(false);
            let out = run_scripted_operator(&self.gateway.handle(), self.gateway.subscribe(), &policy, &stop, Duration::MAX / 4);
            aborted = out.aborted;
        } else {
            while !self.gateway.snapshot().phase.as_ref().is_some_and(|p| p.is_terminal()) {
                std::thread::sleep(Duration::from_millis(50));
            }
        }
        let until = Instant::now() + self.opts.linger;
        while Instant::now() < until {
            std::thread::sleep(Duration::from_millis(20));
        }
        let snap = self.gateway.snapshot();
        HumanSummary {
            final_phase: snap.phase.as_ref().map(|p| p.name().to_string()),
            detail: snap.detail.clone(),
            map_points: snap.points.len(),
            aborted,
            delay: self.gateway.delay_stats(),
        }
    }
}

pub fn serve_human(opts: ServeHumanOptions) -> anyhow::Result<HumanSummary> {
    Ok(HumanServer::start(opts)?.run())
}
