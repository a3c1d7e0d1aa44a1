//! Operator UI bridge: line-delimited JSON over a local WebSocket.
//!
//! Every WebSocket text message carries one or more JSON objects, one per
//! line. The schema below is shared with the browser console.

use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use teleop_net::payload::{AssembledImage, CoarseTaskWire, FinePairWire, MAX_FINE_PAIRS, MAX_PRESET};
use thiserror::Error;
use tungstenite::Message;

use crate::gateway::{GatewayError, GatewayEvent, GatewayHandle, Snapshot};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UiPoint {
    pub id: u32,
    pub x: f32,
    pub y: f32,
    pub z: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UiAnnotation {
    pub id: u32,
    pub u: f32,
    pub v: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UiFinePair {
    pub feature_id: u32,
    pub u: f32,
    pub v: f32,
    pub u_star: f32,
    pub v_star: f32,
}

/// Gateway to UI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum UiEvent {
    /// Incremental: only points the UI has not been sent yet.
    Points { points: Vec<UiPoint> },
    Status { phase: String, detail: String },
    Image { image_id: u16, width: u16, height: u16, pgm_base64: String, annotations: Vec<UiAnnotation> },
    Stats { count: usize, total_bytes: usize, mean_rtt: f64, ms_per_kb: f64 },
}

/// UI to gateway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum UiCommand {
    CoarseTask { target: [f32; 3], preset: u8 },
    FineTask { pairs: Vec<UiFinePair> },
    Abort,
}

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("malformed UI message: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid UI command: {0}")]
    Invalid(String),
}

impl UiEvent {
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("UI event serializes");
        s.push('\n');
        s
    }

    pub fn image(img: &AssembledImage) -> UiEvent {
        UiEvent::Image {
            image_id: img.image_id,
            width: img.width,
            height: img.height,
            pgm_base64: base64::engine::general_purpose::STANDARD.encode(&img.blob.pgm),
            annotations: img.blob.annotations.iter().map(|a| UiAnnotation { id: a.id, u: a.u, v: a.v }).collect(),
        }
    }

    pub fn from_gateway(ev: &GatewayEvent) -> UiEvent {
        match ev {
            GatewayEvent::Points(ps) => {
                UiEvent::Points { points: ps.iter().map(|p| UiPoint { id: p.id, x: p.xyz[0], y: p.xyz[1], z: p.xyz[2] }).collect() }
            }
            GatewayEvent::Status { phase, detail } => UiEvent::Status { phase: phase.name().to_string(), detail: detail.clone() },
            GatewayEvent::Image(img) => UiEvent::image(img),
        }
    }

    /// Messages that bring a freshly connected UI up to date.
    pub fn catch_up(s: &Snapshot) -> Vec<UiEvent> {
        let mut out = Vec::new();
        if !s.points.is_empty() {
            let points = s.points.iter().map(|(&id, p)| UiPoint { id, x: p[0], y: p[1], z: p[2] }).collect();
            out.push(UiEvent::Points { points });
        }
        if let Some(phase) = &s.phase {
            out.push(UiEvent::Status { phase: phase.name().to_string(), detail: s.detail.clone() });
        }
        if let Some(img) = &s.image {
            out.push(UiEvent::image(img));
        }
        out
    }
}

impl UiCommand {
    /// Parses and validates one JSON line.
    pub fn parse(line: &str) -> Result<UiCommand, BridgeError> {
        let cmd: UiCommand = serde_json::from_str(line)?;
        cmd.validate()?;
        Ok(cmd)
    }

    pub fn validate(&self) -> Result<(), BridgeError> {
        match self {
            UiCommand::CoarseTask { target, preset } => {
                if *preset > MAX_PRESET {
                    return Err(BridgeError::Invalid(format!("preset {preset} out of range 0..={MAX_PRESET}")));
                }
                if !target.iter().all(|v| v.is_finite()) {
                    return Err(BridgeError::Invalid("target must be finite".into()));
                }
            }
            UiCommand::FineTask { pairs } => {
                if pairs.is_empty() || pairs.len() > MAX_FINE_PAIRS {
                    return Err(BridgeError::Invalid(format!("fine task needs 1..={MAX_FINE_PAIRS} pairs, got {}", pairs.len())));
                }
                if !pairs.iter().all(|p| [p.u, p.v, p.u_star, p.v_star].iter().all(|v| v.is_finite())) {
                    return Err(BridgeError::Invalid("pixel coordinates must be finite".into()));
                }
            }
            UiCommand::Abort => {}
        }
        Ok(())
    }

    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("UI command serializes");
        s.push('\n');
        s
    }

    /// Forwards the command to the robot through the gateway.
    pub fn execute(&self, gateway: &GatewayHandle) -> Result<(), GatewayError> {
        match self {
            UiCommand::CoarseTask { target, preset } => {
                gateway.send_coarse_task(&CoarseTaskWire { target: *target, preset: *preset })?;
            }
            UiCommand::FineTask { pairs } => {
                let wire: Vec<FinePairWire> = pairs
                    .iter()
                    .map(|p| FinePairWire { feature_id: p.feature_id, u: p.u, v: p.v, u_star: p.u_star, v_star: p.v_star })
                    .collect();
                gateway.send_fine_task(&wire)?;
            }
            UiCommand::Abort => {
                gateway.abort("operator abort")?;
            }
        }
        Ok(())
    }
}

pub fn stats_event(gateway: &GatewayHandle) -> UiEvent {
    let s = gateway.delay_stats();
    UiEvent::Stats { count: s.count, total_bytes: s.total_bytes, mean_rtt: s.mean_rtt, ms_per_kb: s.ms_per_kb }
}

/// Running WebSocket listener. Stops and joins its threads on drop.
pub struct UiBridge {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    threads: Arc<Mutex<Vec<JoinHandle<()>>>>,
    accept: Option<JoinHandle<()>>,
}

const TICK: Duration = Duration::from_millis(20);

impl UiBridge {
    pub fn start(gateway: GatewayHandle, addr: impl ToSocketAddrs) -> io::Result<UiBridge> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let local = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let threads: Arc<Mutex<Vec<JoinHandle<()>>>> = Arc::default();
        let (accept_stop, accept_threads) = (Arc::clone(&stop), Arc::clone(&threads));
        let accept = std::thread::Builder::new().name("ui-bridge".into()).spawn(move || {
            while !accept_stop.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let (gw, st) = (gateway.clone(), Arc::clone(&accept_stop));
                        let t = std::thread::spawn(move || {
                            let _ = serve_connection(stream, &gw, &st);
                        });
                        accept_threads.lock().unwrap().push(t);
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => std::thread::sleep(TICK),
                    Err(_) => std::thread::sleep(TICK),
                }
            }
        })?;
        Ok(UiBridge { addr: local, stop, threads, accept: Some(accept) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for UiBridge {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(a) = self.accept.take() {
            let _ = a.join();
        }
        for t in self.threads.lock().unwrap().drain(..) {
            let _ = t.join();
        }
    }
}

fn send_event(ws: &mut tungstenite::WebSocket<TcpStream>, ev: &UiEvent) -> tungstenite::Result<()> {
    ws.send(Message::text(ev.to_line()))
}

fn serve_connection(stream: TcpStream, gateway: &GatewayHandle, stop: &AtomicBool) -> tungstenite::Result<()> {
    stream.set_nonblocking(false)?;
    let events = gateway.subscribe();
    let mut ws = tungstenite::accept(stream).map_err(|e| match e {
        tungstenite::HandshakeError::Failure(e) => e,
        tungstenite::HandshakeError::Interrupted(_) => tungstenite::Error::Io(io::ErrorKind::WouldBlock.into()),
    })?;
    ws.get_ref().set_read_timeout(Some(TICK))?;
    // points already in the catch-up batch may be repeated by queued events;
    // the UI keys points by id
    for ev in UiEvent::catch_up(&gateway.snapshot()) {
        send_event(&mut ws, &ev)?;
    }
    send_event(&mut ws, &stats_event(gateway))?;
    while !stop.load(Ordering::SeqCst) {
        match ws.read() {
            Ok(Message::Text(text)) => {
                for line in text.as_str().lines().filter(|l| !l.trim().is_empty()) {
                    // malformed or rejected commands are dropped; the UI sees
                    // no phase change
                    if let Ok(cmd) = UiCommand::parse(line) {
                        let _ = cmd.execute(gateway);
                    }
                }
            }
            Ok(Message::Close(_)) => break,
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => break,
            Err(e) => return Err(e),
        }
        while let Ok(ev) = events.try_recv() {
            let status = matches!(ev, GatewayEvent::Status { .. });
            send_event(&mut ws, &UiEvent::from_gateway(&ev))?;
            if status {
                send_event(&mut ws, &stats_event(gateway))?;
            }
        }
    }
    let _ = ws.close(None);
    let _ = ws.flush();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_schema() {
        let c = UiCommand::parse(r#"{"type":"coarse_task","target":[0.1,0.2,0.3],"preset":2}"#).unwrap();
        assert_eq!(c, UiCommand::CoarseTask { target: [0.1, 0.2, 0.3], preset: 2 });
        let f = UiCommand::parse(r#"{"type":"fine_task","pairs":[{"feature_id":7,"u":120,"v":88,"u_star":320,"v_star":240}]}"#).unwrap();
        assert_eq!(f, UiCommand::FineTask { pairs: vec![UiFinePair { feature_id: 7, u: 120.0, v: 88.0, u_star: 320.0, v_star: 240.0 }] });
        assert_eq!(UiCommand::parse(r#"{"type":"abort"}"#).unwrap(), UiCommand::Abort);
        assert_eq!(UiCommand::parse(&UiCommand::Abort.to_line()).unwrap(), UiCommand::Abort);
    }

    #[test]
    fn rejected_commands() {
        assert!(matches!(UiCommand::parse(r#"{"type":"coarse_task","target":[0,0,0],"preset":4}"#), Err(BridgeError::Invalid(_))));
        assert!(matches!(UiCommand::parse(r#"{"type":"fine_task","pairs":[]}"#), Err(BridgeError::Invalid(_))));
        assert!(matches!(UiCommand::parse(r#"{"type":"coarse_task","target":[0,0],"preset":0}"#), Err(BridgeError::Json(_))));
        assert!(matches!(UiCommand::parse(r#"{"type":"launch"}"#), Err(BridgeError::Json(_))));
        assert!(UiCommand::parse("not json").is_err());
    }

    #[test]
    fn event_schema() {
        let ev = UiEvent::Points { points: vec![UiPoint { id: 3, x: 1.0, y: 2.0, z: 0.5 }] };
        let line = ev.to_line();
        assert!(line.ends_with('\n') && !line[..line.len() - 1].contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v, serde_json::json!({"type":"points","points":[{"id":3,"x":1.0,"y":2.0,"z":0.5}]}));
        let st: serde_json::Value =
            serde_json::from_str(&UiEvent::Status { phase: "DONE".into(), detail: "ok".into() }.to_line()).unwrap();
        assert_eq!(st, serde_json::json!({"type":"status","phase":"DONE","detail":"ok"}));
        let stats: serde_json::Value =
            serde_json::from_str(&UiEvent::Stats { count: 2, total_bytes: 4096, mean_rtt: 0.2, ms_per_kb: 100.0 }.to_line()).unwrap();
        assert_eq!(stats["type"], "stats");
        assert_eq!(stats["ms_per_kb"], 100.0);
    }

    #[test]
    fn image_event_encodes_pgm() {
        use teleop_net::payload::{ImageBlob, WireAnnotation};
        let img = AssembledImage {
            image_id: 1,
            width: 2,
            height: 1,
            blob: ImageBlob { pgm: b"P5\n2 1\n255\n\x00\xff".to_vec(), annotations: vec![WireAnnotation { id: 4, u: 1.5, v: 0.5 }] },
        };
        let v: serde_json::Value = serde_json::from_str(&UiEvent::image(&img).to_line()).unwrap();
        assert_eq!(v["type"], "image");
        assert_eq!(v["annotations"][0]["id"], 4);
        let pgm = base64::engine::general_purpose::STANDARD.decode(v["pgm_base64"].as_str().unwrap()).unwrap();
        assert_eq!(pgm, img.blob.pgm);
    }
}
