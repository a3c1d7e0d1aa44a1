use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use teleop_cli::{calibrate_text, read_trials_csv, CalibrationReport, Summary};
use teleop_core::calibration::io::write_dataset;
use teleop_core::calibration::{CalibrationDataset, CalibrationOptions};
use teleop_core::geometry::geodesic_distance;
use teleop_core::simworld::{exploration_trajectory, ExplorationConfig, Scene, VoConfig, World, WorldConfig};

fn teleop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_teleop")).args(args).output().expect("spawn teleop")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

#[test]
fn zero_trials_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = teleop(&["run", "--trials", "0", "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("trials must be at least 1"), "{}", stderr(&o));
    assert!(!dir.path().join("trials.csv").exists());
}

#[test]
fn unknown_scenario_is_rejected() {
    let o = teleop(&["run", "--scenario", "juggle"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("unknown scenario"));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.json");
    fs::write(&cfg, r#"{"scenario": "hold_handler", "trials": 2, "base_seed": 5, "parallel": 2}"#).unwrap();

    let a = dir.path().join("a");
    let o = teleop(&["run", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_trials_csv(&a.join("trials.csv")).unwrap();
    assert_eq!(rows.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![5, 6]);
    let summary: Summary = serde_json::from_str(&fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.scenario, "hold_handler");

    let b = dir.path().join("b");
    let o = teleop(&["run", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap(), "--trials", "1", "--scenario", "press_button"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_trials_csv(&b.join("trials.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].seed, 5);
    let summary: Summary = serde_json::from_str(&fs::read_to_string(b.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.scenario, "press_button");
}

#[test]
fn bad_config_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.json");
    fs::write(&cfg, r#"{"trails": 2}"#).unwrap();
    let o = teleop(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("exp.json"));
}

#[derive(serde::Deserialize)]
struct DelayLine {
    size_bytes: usize,
    rtt_ms: Option<f64>,
}

#[test]
fn summary_matches_trials_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = teleop(&["run", "--trials", "3", "--parallel", "3", "--seed", "20", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_trials_csv(&dir.path().join("trials.csv")).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.success && r.final_phase == "DONE"));
    let written: Summary = serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();

    let recomputed = Summary::from_rows("press_button", &rows, &[]);
    assert_eq!(Summary { delay: Default::default(), ..written.clone() }, recomputed);

    let mut r = csv::Reader::from_path(dir.path().join("delays.csv")).unwrap();
    let lines: Vec<DelayLine> = r.deserialize().collect::<Result<_, _>>().unwrap();
    assert_eq!(written.delay.sent, lines.len());
    assert_eq!(written.delay.count, lines.iter().filter(|l| l.rtt_ms.is_some()).count());
    assert_eq!(written.delay.total_bytes, lines.iter().map(|l| l.size_bytes).sum::<usize>());
    let total: u64 = rows.iter().map(|r| r.robot_to_human_datagrams + r.human_to_robot_datagrams).sum();
    // the delay log has data datagrams only; the row counts include responses
    assert!((lines.len() as u64) < total);
}

#[test]
fn robot_port_in_use_is_a_startup_error() {
    let taken = std::net::UdpSocket::bind("0.0.0.0:0").unwrap();
    let port = taken.local_addr().unwrap().port().to_string();
    let o = teleop(&["serve-robot", "--robot-port", &port, "--human-port", "9"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("binding robot socket"), "{}", stderr(&o));
}

#[test]
fn ui_port_in_use_is_a_startup_error() {
    let taken = std::net::TcpListener::bind("0.0.0.0:0").unwrap();
    let port = taken.local_addr().unwrap().port().to_string();
    let o = teleop(&["serve-human", "--human-port", "0", "--ui-port", &port]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("binding UI socket"), "{}", stderr(&o));
}

fn golden_world() -> (World, Vec<teleop_core::calibration::CalibrationSample>) {
    let scene = Scene::button();
    let target = scene.target("button_center").unwrap();
    // camera origin on the end-effector origin, so the t0 = 0 fit is exact
    let mut cfg = WorldConfig { rng_seed: 11, ..Default::default() };
    cfg.ee_from_cam.translation = nalgebra::Vector3::zeros();
    let explore = ExplorationConfig { rng_seed: 11, ..ExplorationConfig::around(target) };
    let poses = exploration_trajectory(&explore, &cfg.ee_from_cam, &scene.workspace).unwrap();
    let mut world = World::new(scene, cfg, poses[0]);
    let samples = world.explore(&poses, VoConfig::noiseless().with_seed(11), 0.1, |_, _, _| {}).unwrap();
    (world, samples)
}

#[test]
#[ignore = "rewrites the golden calibration files"]
fn regenerate_calibration_golden() {
    let (_, samples) = golden_world();
    let text = write_dataset(&CalibrationDataset::new(samples).unwrap());
    fs::write(data("calib_dataset.txt"), &text).unwrap();
    let report = calibrate_text(&text, &CalibrationOptions::default()).unwrap();
    fs::write(data("calib_expected.json"), serde_json::to_string_pretty(&report).unwrap() + "\n").unwrap();
}

fn flat(v: &serde_json::Value, out: &mut Vec<f64>) {
    match v {
        serde_json::Value::Number(n) => out.push(n.as_f64().unwrap()),
        serde_json::Value::Array(a) => a.iter().for_each(|x| flat(x, out)),
        serde_json::Value::Object(m) => m.values().for_each(|x| flat(x, out)),
        _ => {}
    }
}

#[test]
fn calibrate_matches_golden_output() {
    let o = teleop(&["calibrate", data("calib_dataset.txt").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let got: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let want: serde_json::Value = serde_json::from_str(&fs::read_to_string(data("calib_expected.json")).unwrap()).unwrap();
    let (mut g, mut w) = (Vec::new(), Vec::new());
    flat(&got, &mut g);
    flat(&want, &mut w);
    assert_eq!(g.len(), w.len());
    for (a, b) in g.iter().zip(&w) {
        assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn golden_output_recovers_the_simulated_truth() {
    let report: CalibrationReport = serde_json::from_str(&fs::read_to_string(data("calib_expected.json")).unwrap()).unwrap();
    let (world, _) = golden_world();
    let rot = |m: [[f64; 3]; 3]| nalgebra::Rotation3::from_matrix_unchecked(nalgebra::Matrix3::from_fn(|i, j| m[i][j]));
    assert!(geodesic_distance(&rot(report.ee_from_cam_rotation.matrix), &world.cfg.ee_from_cam.rotation) < 1e-6);
    let vo = world.vo().unwrap();
    let truth = vo.true_base_from_c0();
    assert!(geodesic_distance(&rot(report.base_from_c0_rotation.matrix), &truth.rotation) < 1e-6);
    let t = report.base_from_c0_translation;
    assert!((nalgebra::Vector3::new(t[0], t[1], t[2]) - truth.translation).norm() < 1e-6);
    for (d, s) in report.scale.iter().zip(vo.config().scale_per_axis.iter()) {
        assert!((d * s - 1.0).abs() < 1e-6, "D {d} vs 1/{s}");
    }
    assert!(report.residuals.translation_rms_m < 1e-9);
}

#[test]
fn calibrate_reports_bad_line_number() {
    let text = fs::read_to_string(data("calib_dataset.txt")).unwrap();
    let mut lines: Vec<String> = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')).map(String::from).collect();
    lines[2] = lines[2].replacen(' ', " x", 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.txt");
    fs::write(&path, lines.join("\n")).unwrap();
    let o = teleop(&["calibrate", path.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("line 3:"), "{}", stderr(&o));
}

#[test]
fn calibrate_rejects_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.txt");
    fs::write(&path, "").unwrap();
    let o = teleop(&["calibrate", path.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(o.stdout.is_empty());
    assert!(!stderr(&o).is_empty());
}
