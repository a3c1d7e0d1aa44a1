use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use teleop_core::calibration::CalibrationOptions;
use teleop_core::simworld::Scene;
use teleop_net::{EndpointConfig, ImpairmentConfig};
use teleop_cli::{cmd_calibrate, cmd_run, serve_robot, ExperimentConfig, Perturbation, Scenario, ServeHumanOptions, ServeRobotOptions};

#[derive(Parser)]
#[command(name = "teleop", version, about = "Uncalibrated teleoperation over a slow link: experiments and services")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a batch of simulated trials with the scripted operator.
    Run(RunArgs),
    /// Robot side of a two-process session.
    ServeRobot(ServeRobotArgs),
    /// Operator side of a two-process session, with the UI bridge.
    ServeHuman(ServeHumanArgs),
    /// Hand-eye calibration of a dataset file; prints JSON.
    Calibrate(CalibrateArgs),
}

#[derive(Args, Clone, Default)]
struct LinkArgs {
    /// One-way latency added on egress.
    #[arg(long)]
    latency_ms: Option<f64>,
    #[arg(long)]
    jitter_ms: Option<f64>,
    /// Drop probability per datagram.
    #[arg(long)]
    loss: Option<f64>,
    /// Bytes per second, 0 for unlimited.
    #[arg(long)]
    bandwidth_bps: Option<f64>,
}

impl LinkArgs {
    fn apply(&self, mut cfg: ImpairmentConfig) -> ImpairmentConfig {
        if let Some(v) = self.latency_ms {
            cfg.one_way_latency = v / 1000.0;
        }
        if let Some(v) = self.jitter_ms {
            cfg.jitter = v / 1000.0;
        }
        if let Some(v) = self.loss {
            cfg.loss_probability = v;
        }
        if let Some(v) = self.bandwidth_bps {
            cfg.bandwidth_cap = v;
        }
        cfg
    }
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// hold_handler or press_button.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
    /// First seed; trial i uses seed + i.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    link: LinkArgs,
    #[arg(long)]
    vo_noise: bool,
    /// Pixel noise standard deviation.
    #[arg(long)]
    pixel_noise: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Trials run concurrently.
    #[arg(long)]
    parallel: Option<usize>,
    /// Rotate the calibrated base-from-odometry frame by this angle.
    #[arg(long)]
    perturb_rot_deg: Option<f64>,
    /// Multiply the calibrated scale by this factor.
    #[arg(long)]
    perturb_scale: Option<f64>,
}

impl RunArgs {
    fn experiment(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_json_file(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = &self.scenario {
            cfg.scenario = s.clone();
        }
        if let Some(n) = self.trials {
            cfg.trials = n;
            if cfg.seeds.len() != n {
                cfg.seeds.clear();
            }
        }
        if let Some(s) = self.seed {
            cfg.base_seed = s;
            cfg.seeds.clear();
        }
        cfg.impairment = self.link.apply(cfg.impairment);
        cfg.vo_noise |= self.vo_noise;
        if let Some(v) = self.pixel_noise {
            cfg.pixel_noise = v;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(p) = self.parallel {
            cfg.parallel = p;
        }
        if self.perturb_rot_deg.is_some() || self.perturb_scale.is_some() {
            let base = cfg.perturbation.unwrap_or(Perturbation { rotation_deg: 0.0, scale_factor: 1.0 });
            cfg.perturbation = Some(Perturbation {
                rotation_deg: self.perturb_rot_deg.unwrap_or(base.rotation_deg),
                scale_factor: self.perturb_scale.unwrap_or(base.scale_factor),
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct ServeRobotArgs {
    #[arg(long, default_value = "press_button")]
    scenario: String,
    /// Scene JSON replacing the scenario's scene.
    #[arg(long, requires = "target")]
    scene: Option<PathBuf>,
    #[arg(long)]
    target: Option<String>,
    #[arg(long, default_value_t = 47001)]
    robot_port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    human_host: String,
    #[arg(long, default_value_t = 47002)]
    human_port: u16,
    #[command(flatten)]
    link: LinkArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    vo_noise: bool,
    #[arg(long, default_value_t = 0.0)]
    pixel_noise: f64,
    #[arg(long)]
    perturb_rot_deg: Option<f64>,
    #[arg(long)]
    perturb_scale: Option<f64>,
    /// Give up waiting for an operator task after this long.
    #[arg(long)]
    await_timeout_s: Option<f64>,
    /// Also write the session report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ServeHumanArgs {
    #[arg(long, default_value_t = 47002)]
    human_port: u16,
    /// Robot address; learned from the first datagram when omitted.
    #[arg(long)]
    robot: Option<String>,
    #[arg(long, default_value_t = 47080)]
    ui_port: u16,
    #[arg(long)]
    no_ui: bool,
    /// Plan the tasks for this scenario instead of waiting for the UI.
    #[arg(long)]
    scripted: Option<String>,
    #[command(flatten)]
    link: LinkArgs,
}

#[derive(Args)]
struct CalibrateArgs {
    dataset: PathBuf,
    /// Also estimate the camera offset from the end effector.
    #[arg(long)]
    refine_t0: bool,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.experiment()?;
            let out = cmd_run(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&out.summary)?);
            eprintln!("wrote {}, {}, {}", out.trials_csv.display(), out.summary_json.display(), out.delays_csv.display());
        }
        Command::ServeRobot(args) => {
            let scenario = Scenario::parse(&args.scenario)?;
            let mut opts =
                ServeRobotOptions::new(scenario, format!("0.0.0.0:{}", args.robot_port), format!("{}:{}", args.human_host, args.human_port));
            if let Some(path) = &args.scene {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                opts.scene = Scene::from_json(&text)?;
            }
            if let Some(t) = &args.target {
                opts.target_name = t.clone();
            }
            opts.impairment = args.link.apply(ImpairmentConfig { rng_seed: args.seed, ..Default::default() });
            opts.impairment.validate()?;
            opts.endpoint = EndpointConfig { max_retries: u32::MAX, ..EndpointConfig::for_link(opts.impairment.one_way_latency, opts.impairment.jitter) };
            opts.seed = args.seed;
            opts.vo_noise = args.vo_noise;
            opts.pixel_noise = args.pixel_noise;
            if args.perturb_rot_deg.is_some() || args.perturb_scale.is_some() {
                opts.perturbation = Some((args.perturb_rot_deg.unwrap_or(0.0), args.perturb_scale.unwrap_or(1.0)));
            }
            opts.await_timeout = args.await_timeout_s.map(Duration::from_secs_f64);
            eprintln!("robot on {} -> {}", opts.bind, opts.peer);
            let report = serve_robot(&opts)?;
            let json = report.to_json();
            if let Some(path) = &args.report {
                std::fs::write(path, &json).with_context(|| format!("writing {}", path.display()))?;
            }
            println!("{json}");
            if !report.success {
                anyhow::bail!("session ended in {}", report.final_phase);
            }
        }
        Command::ServeHuman(args) => {
            let mut opts = ServeHumanOptions::new(format!("0.0.0.0:{}", args.human_port));
            opts.peer = args.robot.clone();
            opts.ui = (!args.no_ui).then(|| format!("0.0.0.0:{}", args.ui_port));
            opts.scripted = args.scripted.as_deref().map(Scenario::parse).transpose()?;
            opts.impairment = args.link.apply(ImpairmentConfig::default());
            opts.impairment.validate()?;
            opts.endpoint = EndpointConfig { max_retries: u32::MAX, ..EndpointConfig::for_link(opts.impairment.one_way_latency, opts.impairment.jitter) };
            let server = teleop_cli::HumanServer::start(opts)?;
            if let Some(addr) = server.ui_addr() {
                eprintln!("UI bridge on ws://{addr}");
            }
            let summary = server.run();
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Calibrate(args) => {
            let opts = CalibrationOptions { refine_t0: args.refine_t0, ..Default::default() };
            let report = cmd_calibrate(&args.dataset, &opts)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
