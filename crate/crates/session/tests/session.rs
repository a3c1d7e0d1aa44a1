use std::sync::Arc;
use std::time::Duration;

use teleop_core::simworld::{default_ee_from_cam, Scene};
use teleop_net::payload::{decode_coarse_task, encode_image_chunk, encode_map_points, ImageBlob, WireAnnotation, WirePoint, MAX_MAP_POINTS};
use teleop_net::{Endpoint, EndpointConfig, ImpairedTransport, ImpairmentConfig, MemoryTransport, MsgType, UdpTransport};
use teleop_session::{
    run_local_session, run_robot_agent, ExplorationPlan, Gateway, OperatorPolicy, RobotAgentConfig, SessionConfig, UiBridge,
};
use tungstenite::Message;

fn button_session(seed: u64) -> SessionConfig {
    let robot = RobotAgentConfig::new(Scene::button(), "button_center", seed);
    SessionConfig::new(robot, OperatorPolicy::new(Scene::button(), "button_center", 0))
}

fn fast_retries() -> EndpointConfig {
    EndpointConfig { timeout: Duration::from_millis(40), max_retries: 60, reliable: true }
}

#[test]
fn button_session_reaches_done() {
    let out = run_local_session(&button_session(1)).unwrap();
    let r = &out.report;
    assert!(r.success, "{r:?}");
    assert_eq!(r.final_phase, "DONE");
    assert!(r.final_error_mm.unwrap() <= 10.0);
    let expected = ["IDLE", "EXPLORING", "CALIBRATING", "AWAIT_COARSE_TASK", "COARSE_MOVING", "SENDING_IMAGE", "AWAIT_FINE_TASK", "FINE_SERVOING", "DONE"];
    assert_eq!(r.phases, expected);
    assert_eq!(out.point_store.len(), r.map_points_sent);
    assert!(out.operator.coarse_payload.is_some() && out.operator.fine_payload.is_some());
    assert_eq!(out.operator.final_phase, Some(teleop_session::RobotPhase::Done));
    assert!(r.durations.exploration_s > 0.0 && r.durations.coarse_s > 0.0);
}

#[test]
fn handle_session_reaches_done() {
    let robot = RobotAgentConfig::new(Scene::handle(), "handle_grasp", 4);
    let cfg = SessionConfig::new(robot, OperatorPolicy::new(Scene::handle(), "handle_grasp", 1));
    let out = run_local_session(&cfg).unwrap();
    assert!(out.report.success, "{:?}", out.report);
}

#[test]
fn report_totals_match_delay_logs() {
    let out = run_local_session(&button_session(2)).unwrap();
    let r = &out.report;
    let sent: u64 = out.robot_log.iter().map(|e| e.size_bytes as u64).sum();
    let data_bytes: u64 = r.robot_to_human.by_type.iter().filter(|(k, _)| *k != "RESPONSE").map(|(_, t)| t.bytes).sum();
    assert_eq!(data_bytes, sent);
    assert_eq!(r.robot_delay.total_bytes as u64, sent);
    let human = r.human_to_robot.as_ref().unwrap();
    let human_sent: u64 = out.human_log.iter().map(|e| e.size_bytes as u64).sum();
    assert_eq!(human.by_type["TASK_COARSE"].count, 1);
    assert_eq!(human.by_type["TASK_FINE"].count, 1);
    // every robot datagram transmission was acknowledged once by the human side
    let robot_transmissions: u64 = out.robot_log.iter().map(|e| e.transmissions as u64).sum();
    assert_eq!(human.by_type["RESPONSE"].count, robot_transmissions);
    assert_eq!(human.bytes, human_sent + human.by_type["RESPONSE"].bytes);
}

#[test]
fn fixed_seeds_are_deterministic() {
    let a = run_local_session(&button_session(7)).unwrap();
    let b = run_local_session(&button_session(7)).unwrap();
    assert_eq!(a.operator.coarse_payload, b.operator.coarse_payload);
    assert_eq!(a.operator.fine_payload, b.operator.fine_payload);
    assert_eq!(a.point_store, b.point_store);
    assert_eq!(a.report.final_error_mm, b.report.final_error_mm);
    assert_eq!(a.report.durations, b.report.durations);
    assert_eq!(a.report.phases, b.report.phases);
    assert_eq!(a.report.robot_to_human, b.report.robot_to_human);
}

#[test]
fn lossy_link_changes_only_cost() {
    let clean = run_local_session(&button_session(3)).unwrap();
    let mut cfg = button_session(3);
    cfg.impairment = ImpairmentConfig { loss_probability: 0.3, rng_seed: 3, ..Default::default() };
    cfg.endpoint = Some(fast_retries());
    let lossy = run_local_session(&cfg).unwrap();
    assert_eq!(lossy.report.final_phase, "DONE");
    assert_eq!(lossy.point_store, clean.point_store);
    assert_eq!(lossy.report.success, clean.report.success);
    assert_eq!(lossy.report.final_error_mm, clean.report.final_error_mm);
    assert_eq!(lossy.operator.fine_payload, clean.operator.fine_payload);
    assert!(lossy.report.robot_to_human.bytes > clean.report.robot_to_human.bytes);
}

#[test]
fn missing_operator_times_out() {
    let (a, b) = MemoryTransport::pair();
    let _gateway = Gateway::start(Arc::new(b), EndpointConfig::default());
    let mut cfg = RobotAgentConfig::new(Scene::button(), "button_center", 1);
    cfg.await_timeout = Some(Duration::from_millis(300));
    let ep = Endpoint::new(Arc::new(a), EndpointConfig::default());
    let r = run_robot_agent(&cfg, &ep);
    assert!(!r.success);
    assert_eq!(r.final_phase, "FAILED");
    assert!(r.failure.as_deref().unwrap().contains("timeout"), "{:?}", r.failure);
    let n = r.phases.len();
    assert_eq!(r.phases[n - 2], "AWAIT_COARSE_TASK");
}

#[test]
fn camera_that_never_moves_fails_calibration() {
    let (a, b) = MemoryTransport::pair();
    let gateway = Gateway::start(Arc::new(b), EndpointConfig::default());
    let mut cfg = RobotAgentConfig::new(Scene::button(), "button_center", 1);
    let target = cfg.scene.target("button_center").unwrap();
    let fixed = teleop_core::simworld::exploration_trajectory(
        &teleop_core::simworld::ExplorationConfig::around(target),
        &default_ee_from_cam(),
        &cfg.scene.workspace,
    )
    .unwrap()[0];
    cfg.exploration = ExplorationPlan::Waypoints(vec![fixed; 10]);
    let ep = Endpoint::new(Arc::new(a), EndpointConfig::default());
    let r = run_robot_agent(&cfg, &ep);
    assert!(r.failure.as_deref().unwrap().starts_with("calibration"), "{:?}", r.failure);
    assert!(!r.phases.iter().any(|p| p == "COARSE_MOVING"));
    std::thread::sleep(Duration::from_millis(100));
    assert!(matches!(gateway.snapshot().phase, Some(teleop_session::RobotPhase::Failed(_))));
}

#[test]
fn operator_abort_fails_the_robot() {
    let mut cfg = button_session(1);
    cfg.operator.preset = 9;
    let out = run_local_session(&cfg).unwrap();
    assert!(out.operator.aborted.is_some());
    assert!(out.report.failure.as_deref().unwrap().starts_with("operator abort"), "{:?}", out.report.failure);
    assert!(!out.report.phases.iter().any(|p| p == "COARSE_MOVING"));
}

#[test]
fn gateway_keeps_each_point_once_under_retransmission() {
    let (a, b) = MemoryTransport::pair();
    // drop half of the acknowledgements so many batches arrive twice
    let gw_link = ImpairedTransport::new(b, ImpairmentConfig { loss_probability: 0.5, rng_seed: 5, ..Default::default() }).unwrap();
    let gateway = Gateway::start(Arc::new(gw_link), fast_retries());
    let robot = Endpoint::new(Arc::new(a), fast_retries());
    let points: Vec<WirePoint> = (0..500).map(|i| WirePoint { id: i, xyz: [i as f32, 0.5, -1.0] }).collect();
    let mut retransmitted = 0;
    for batch in points.chunks(MAX_MAP_POINTS) {
        retransmitted += robot.send_with_response(MsgType::MapPoints, encode_map_points(batch).unwrap()).unwrap().transmissions - 1;
    }
    // a repeated point id in a new datagram is also absorbed
    robot.send_with_response(MsgType::MapPoints, encode_map_points(&points[..10]).unwrap()).unwrap();
    assert!(retransmitted > 0);
    std::thread::sleep(Duration::from_millis(200));
    let snap = gateway.snapshot();
    assert_eq!(snap.points.len(), 500);
    assert_eq!(snap.points[&499], [499.0, 0.5, -1.0]);
}

#[test]
fn gateway_reassembles_image() {
    let (a, b) = MemoryTransport::pair();
    let gateway = Gateway::start(Arc::new(b), EndpointConfig::default());
    let robot = Endpoint::new(Arc::new(a), EndpointConfig::default());
    let img = teleop_core::simworld::SyntheticImage {
        width: 64,
        height: 64,
        pixels: (0..64 * 64).map(|i| (i * 7 % 256) as u8).collect(),
        feature_annotations: vec![],
    };
    let pgm = img.to_pgm();
    let blob = ImageBlob { pgm: pgm.clone(), annotations: vec![WireAnnotation { id: 2, u: 3.5, v: 60.25 }] };
    let events = gateway.subscribe();
    for c in blob.chunks(9, 64, 64).unwrap() {
        robot.send_with_response(MsgType::ImageChunk, encode_image_chunk(&c).unwrap()).unwrap();
    }
    let ev = events.recv_timeout(Duration::from_secs(2)).unwrap();
    let teleop_session::GatewayEvent::Image(got) = ev else { panic!("expected image event, got {ev:?}") };
    assert_eq!((got.image_id, got.width, got.height), (9, 64, 64));
    assert_eq!(got.blob.pgm, pgm);
    assert_eq!(got.blob.annotations, blob.annotations);
}

#[test]
fn ui_coarse_task_reaches_the_robot_unchanged() {
    let robot_udp = UdpTransport::bind("127.0.0.1:0").unwrap();
    let human_udp = UdpTransport::bind_to_peer("127.0.0.1:0", robot_udp.local_addr().unwrap()).unwrap();
    robot_udp.set_peer(human_udp.local_addr().unwrap());
    let gateway = Gateway::start(Arc::new(human_udp), EndpointConfig::default());
    let robot = Endpoint::new(Arc::new(robot_udp), EndpointConfig::default());
    let points = [WirePoint { id: 1, xyz: [0.25, -0.5, 1.0] }, WirePoint { id: 2, xyz: [0.0, 0.0, 2.0] }];
    robot.send_with_response(MsgType::MapPoints, encode_map_points(&points).unwrap()).unwrap();
    std::thread::sleep(Duration::from_millis(100));

    let bridge = UiBridge::start(gateway.handle(), "127.0.0.1:0").unwrap();
    let (mut ws, _) = tungstenite::connect(format!("ws://{}", bridge.local_addr())).unwrap();
    let first = ws.read().unwrap();
    let v: serde_json::Value = serde_json::from_str(first.to_text().unwrap().trim()).unwrap();
    assert_eq!(v["type"], "points");
    assert_eq!(v["points"].as_array().unwrap().len(), 2);

    ws.send(Message::text("{\"type\":\"coarse_task\",\"target\":[0.1,0.2,0.3],\"preset\":2}\n")).unwrap();
    let d = robot.recv(Duration::from_secs(2)).expect("task datagram");
    assert_eq!(d.msg_type, MsgType::TaskCoarse);
    let task = decode_coarse_task(&d.payload).unwrap();
    assert_eq!(task.target, [0.1f32, 0.2f32, 0.3f32]);
    assert_eq!(task.preset, 2);

    // invalid commands are dropped
    ws.send(Message::text("{\"type\":\"coarse_task\",\"target\":[0,0,0],\"preset\":7}\n")).unwrap();
    assert!(robot.recv(Duration::from_millis(200)).is_none());
    let _ = ws.close(None);
}

#[test]
fn ui_receives_live_status_and_points() {
    let (a, b) = MemoryTransport::pair();
    let gateway = Gateway::start(Arc::new(b), EndpointConfig::default());
    let robot = Endpoint::new(Arc::new(a), EndpointConfig::default());
    let bridge = UiBridge::start(gateway.handle(), "127.0.0.1:0").unwrap();
    let (mut ws, _) = tungstenite::connect(format!("ws://{}", bridge.local_addr())).unwrap();
    // catch-up on an empty session is just the stats line
    let v: serde_json::Value = serde_json::from_str(ws.read().unwrap().to_text().unwrap().trim()).unwrap();
    assert_eq!(v["type"], "stats");
    let st = teleop_net::payload::StatusWire { phase: 1, detail: "waypoints=30".into() };
    robot.send_with_response(MsgType::Status, teleop_net::payload::encode_status(&st)).unwrap();
    robot.send_with_response(MsgType::MapPoints, encode_map_points(&[WirePoint { id: 5, xyz: [1.0, 2.0, 3.0] }]).unwrap()).unwrap();
    let mut seen = Vec::new();
    while seen.len() < 3 {
        let msg = ws.read().unwrap();
        for line in msg.to_text().unwrap().lines() {
            seen.push(serde_json::from_str::<serde_json::Value>(line).unwrap());
        }
    }
    assert_eq!(seen[0], serde_json::json!({"type":"status","phase":"EXPLORING","detail":"waypoints=30"}));
    assert_eq!(seen[1]["type"], "stats");
    assert_eq!(seen[2], serde_json::json!({"type":"points","points":[{"id":5,"x":1.0,"y":2.0,"z":3.0}]}));
}
