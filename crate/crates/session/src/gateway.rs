//! Human-side agent: acknowledges and accumulates robot telemetry and
//! forwards operator commands.

use std::collections::BTreeMap;
use std::ops::Deref;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use teleop_net::payload::{
    decode_image_chunk, decode_map_points, decode_poses, decode_status, encode_coarse_task, encode_fine_task,
    encode_status, AssembledImage, CoarseTaskWire, FinePairWire, ImageAssembler, PayloadError, StatusWire, WirePoint,
    WirePose, STATUS_ABORT,
};
use teleop_net::{compute_stats, Datagram, DelayLogEntry, DelayStats, Endpoint, EndpointConfig, MsgType, NetError, Transport};
use thiserror::Error;

use crate::phase::RobotPhase;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Payload(#[from] PayloadError),
}

/// Immutable view of everything received so far. Replaced wholesale on
/// every update, so readers never see a half-applied datagram.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Snapshot {
    pub points: BTreeMap<u32, [f32; 3]>,
    pub poses: Vec<WirePose>,
    pub phase: Option<RobotPhase>,
    pub detail: String,
    pub phase_history: Vec<RobotPhase>,
    pub image: Option<Arc<AssembledImage>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GatewayEvent {
    /// Points not seen before, in arrival order.
    Points(Vec<WirePoint>),
    Status { phase: RobotPhase, detail: String },
    Image(Arc<AssembledImage>),
}

struct Inner {
    endpoint: Endpoint,
    snapshot: Mutex<Arc<Snapshot>>,
    subscribers: Mutex<Vec<Sender<GatewayEvent>>>,
    stop: AtomicBool,
    malformed: AtomicU64,
}

/// Shareable handle to a running gateway.
#[derive(Clone)]
pub struct GatewayHandle {
    inner: Arc<Inner>,
}

impl GatewayHandle {
    pub fn snapshot(&self) -> Arc<Snapshot> {
        Arc::clone(&self.inner.snapshot.lock().unwrap())
    }

    /// Events from now on. Pair with [`Self::snapshot`] for the state so far.
    pub fn subscribe(&self) -> Receiver<GatewayEvent> {
        let (tx, rx) = channel();
        self.inner.subscribers.lock().unwrap().push(tx);
        rx
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.inner.endpoint
    }

    pub fn delay_log(&self) -> Vec<DelayLogEntry> {
        self.inner.endpoint.delay_log()
    }

    pub fn delay_stats(&self) -> DelayStats {
        compute_stats(&self.inner.endpoint.delay_log())
    }

    /// Datagrams that decoded as frames but carried an unusable payload.
    pub fn malformed_payloads(&self) -> u64 {
        self.inner.malformed.load(Ordering::Relaxed)
    }

    pub fn send_coarse_task(&self, task: &CoarseTaskWire) -> Result<DelayLogEntry, GatewayError> {
        let payload = encode_coarse_task(task)?;
        Ok(self.inner.endpoint.send_with_response(MsgType::TaskCoarse, payload)?)
    }

    pub fn send_fine_task(&self, pairs: &[FinePairWire]) -> Result<DelayLogEntry, GatewayError> {
        let payload = encode_fine_task(pairs)?;
        Ok(self.inner.endpoint.send_with_response(MsgType::TaskFine, payload)?)
    }

    pub fn abort(&self, reason: &str) -> Result<DelayLogEntry, GatewayError> {
        let payload = encode_status(&StatusWire { phase: STATUS_ABORT, detail: reason.to_string() });
        Ok(self.inner.endpoint.send_with_response(MsgType::Status, payload)?)
    }

    fn update(&self, f: impl FnOnce(&mut Snapshot)) {
        let mut guard = self.inner.snapshot.lock().unwrap();
        let mut next = (**guard).clone();
        f(&mut next);
        *guard = Arc::new(next);
    }

    fn publish(&self, event: GatewayEvent) {
        self.inner.subscribers.lock().unwrap().retain(|s| s.send(event.clone()).is_ok());
    }
}

pub struct Gateway {
    handle: GatewayHandle,
    worker: Option<JoinHandle<()>>,
}

const POLL: Duration = Duration::from_millis(50);

impl Gateway {
    pub fn start(transport: Arc<dyn Transport>, cfg: EndpointConfig) -> Gateway {
        let handle = GatewayHandle {
            inner: Arc::new(Inner {
                endpoint: Endpoint::new(transport, cfg),
                snapshot: Mutex::new(Arc::new(Snapshot::default())),
                subscribers: Mutex::new(Vec::new()),
                stop: AtomicBool::new(false),
                malformed: AtomicU64::new(0),
            }),
        };
        let worker_handle = handle.clone();
        let worker = std::thread::Builder::new()
            .name("gateway".into())
            .spawn(move || {
                let mut images = ImageAssembler::new();
                while !worker_handle.inner.stop.load(Ordering::SeqCst) {
                    if let Some(d) = worker_handle.inner.endpoint.recv(POLL) {
                        if absorb(&worker_handle, &mut images, d).is_err() {
                            worker_handle.inner.malformed.fetch_add(1, Ordering::Relaxed);
                        }
                    }
                }
            })
            .expect("spawn gateway worker");
        Gateway { handle, worker: Some(worker) }
    }

    pub fn handle(&self) -> GatewayHandle {
        self.handle.clone()
    }

    pub fn shutdown(&mut self) {
        self.handle.inner.stop.store(true, Ordering::SeqCst);
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

impl Deref for Gateway {
    type Target = GatewayHandle;
    fn deref(&self) -> &GatewayHandle {
        &self.handle
    }
}

impl Drop for Gateway {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn absorb(gw: &GatewayHandle, images: &mut ImageAssembler, d: Datagram) -> Result<(), PayloadError> {
    match d.msg_type {
        MsgType::MapPoints => {
            let points = decode_map_points(&d.payload)?;
            let mut fresh = Vec::new();
            gw.update(|s| {
                for p in points {
                    if let std::collections::btree_map::Entry::Vacant(e) = s.points.entry(p.id) {
                        e.insert(p.xyz);
                        fresh.push(p);
                    }
                }
            });
            if !fresh.is_empty() {
                gw.publish(GatewayEvent::Points(fresh));
            }
        }
        MsgType::Pose => {
            let poses = decode_poses(&d.payload)?;
            gw.update(|s| s.poses.extend(poses));
        }
        MsgType::ImageChunk => {
            if let Some(img) = images.add(decode_image_chunk(&d.payload)?)? {
                let img = Arc::new(img);
                gw.update(|s| s.image = Some(Arc::clone(&img)));
                gw.publish(GatewayEvent::Image(img));
            }
        }
        MsgType::Status => {
            let st = decode_status(&d.payload)?;
            let phase = RobotPhase::from_code(st.phase, &st.detail).ok_or(PayloadError::Invalid(format!("phase code {}", st.phase)))?;
            gw.update(|s| {
                s.phase = Some(phase.clone());
                s.detail = st.detail.clone();
                s.phase_history.push(phase.clone());
            });
            gw.publish(GatewayEvent::Status { phase, detail: st.detail });
        }
        // nothing else is addressed to the human side
        _ => {}
    }
    Ok(())
}
