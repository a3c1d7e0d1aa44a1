//! Stop-and-wait reliability over a [`Transport`].
//!
//! Every non-RESPONSE datagram is acknowledged by a RESPONSE that echoes
//! its id. Senders retransmit the identical frame until the echo arrives;
//! receivers acknowledge every copy but deliver each id once. Round trips
//! are timed on one local monotonic clock.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{decode, encode, Datagram, FrameError, MsgType};
use crate::transport::Transport;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("datagram {id} was not acknowledged after {attempts} transmissions")]
    DeliveryFailure { id: u32, attempts: u32 },
    #[error("RESPONSE frames are generated by the endpoint and cannot be sent directly")]
    ResponseNotSendable,
    #[error("endpoint is shut down")]
    Closed,
    #[error("transport: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub timeout: Duration,
    pub max_retries: u32,
    /// With `false`, each datagram is sent once and its echo awaited for one
    /// timeout; a missing echo is logged, not an error.
    pub reliable: bool,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self { timeout: DEFAULT_TIMEOUT, max_retries: DEFAULT_MAX_RETRIES, reliable: true }
    }
}

pub const DEFAULT_TIMEOUT: Duration = Duration::from_millis(500);
pub const DEFAULT_MAX_RETRIES: u32 = 20;

impl EndpointConfig {
    /// Default retransmission timeout stretched to cover a link with the
    /// given one-way latency and jitter: `max(500 ms, 2·(lat + jitter) + 200 ms)`.
    pub fn for_link(one_way_latency: f64, jitter: f64) -> Self {
        let needed = Duration::from_secs_f64(2.0 * (one_way_latency + jitter) + 0.2);
        Self { timeout: DEFAULT_TIMEOUT.max(needed), ..Self::default() }
    }
}

/// One sent datagram as seen by its sender.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayLogEntry {
    pub datagram_id: u32,
    pub msg_type: MsgType,
    /// Bytes put on the wire for this datagram: frame length times
    /// transmissions.
    pub size_bytes: usize,
    pub frame_bytes: usize,
    pub transmissions: u32,
    /// Seconds since the endpoint's epoch, at the first transmission.
    pub t_sent: f64,
    pub t_response_received: Option<f64>,
}

impl DelayLogEntry {
    pub fn rtt(&self) -> Option<f64> {
        self.t_response_received.map(|t| t - self.t_sent)
    }
}

/// A RESPONSE that matched nothing in flight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LateResponse {
    pub datagram_id: u32,
    pub t_received: f64,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficCounters {
    pub data_frames_sent: u64,
    pub data_bytes_sent: u64,
    pub responses_sent: u64,
    pub response_bytes_sent: u64,
    pub data_frames_received: u64,
    pub duplicates_received: u64,
    pub responses_received: u64,
    pub corrupt_received: u64,
}

#[derive(Default)]
struct State {
    /// id -> response time, for ids currently being waited on.
    in_flight: HashMap<u32, Option<f64>>,
    seen: HashSet<u32>,
    inbox: VecDeque<Datagram>,
    log: Vec<DelayLogEntry>,
    late: Vec<LateResponse>,
    counters: TrafficCounters,
}

struct Shared {
    transport: Arc<dyn Transport>,
    epoch: Instant,
    state: Mutex<State>,
    response_cv: Condvar,
    inbox_cv: Condvar,
    shutdown: AtomicBool,
}

impl Shared {
    fn now(&self) -> f64 {
        self.epoch.elapsed().as_secs_f64()
    }
}

pub struct Endpoint {
    shared: Arc<Shared>,
    cfg: EndpointConfig,
    next_id: AtomicU32,
    send_lock: Mutex<()>,
    rx: Option<JoinHandle<()>>,
}

const RX_POLL: Duration = Duration::from_millis(20);

impl Endpoint {
    pub fn new(transport: Arc<dyn Transport>, cfg: EndpointConfig) -> Self {
        let shared = Arc::new(Shared {
            transport,
            epoch: Instant::now(),
            state: Mutex::new(State::default()),
            response_cv: Condvar::new(),
            inbox_cv: Condvar::new(),
            shutdown: AtomicBool::new(false),
        });
        let rx_shared = Arc::clone(&shared);
        let rx = std::thread::Builder::new()
            .name("endpoint-rx".into())
            .spawn(move || receive_loop(&rx_shared))
            .expect("spawn receive thread");
        Self { shared, cfg, next_id: AtomicU32::new(1), send_lock: Mutex::new(()), rx: Some(rx) }
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    /// Seconds on this endpoint's monotonic clock.
    pub fn now(&self) -> f64 {
        self.shared.now()
    }

    /// Sends a datagram and waits for its echo, retransmitting on timeout.
    /// Concurrent callers are serialized.
    pub fn send_with_response(&self, msg_type: MsgType, payload: Vec<u8>) -> Result<DelayLogEntry, NetError> {
        if msg_type == MsgType::Response {
            return Err(NetError::ResponseNotSendable);
        }
        let _serial = self.send_lock.lock().unwrap();
        if self.shared.shutdown.load(Ordering::SeqCst) {
            return Err(NetError::Closed);
        }
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let frame = encode(&Datagram::new(msg_type, id, payload))?;
        let attempts_allowed = if self.cfg.reliable { self.cfg.max_retries.saturating_add(1) } else { 1 };
        let mut st = self.shared.state.lock().unwrap();
        st.in_flight.insert(id, None);
        let t_sent = self.shared.now();
        let mut transmissions = 0;
        let mut answered = None;
        while transmissions < attempts_allowed {
            drop(st);
            self.shared.transport.send(&frame)?;
            st = self.shared.state.lock().unwrap();
            transmissions += 1;
            st.counters.data_frames_sent += 1;
            st.counters.data_bytes_sent += frame.len() as u64;
            let deadline = Instant::now() + self.cfg.timeout;
            loop {
                if let Some(Some(t)) = st.in_flight.get(&id) {
                    answered = Some(*t);
                    break;
                }
                let now = Instant::now();
                if now >= deadline {
                    break;
                }
                st = self.shared.response_cv.wait_timeout(st, deadline - now).unwrap().0;
            }
            if answered.is_some() {
                break;
            }
        }
        st.in_flight.remove(&id);
        let entry = DelayLogEntry {
            datagram_id: id,
            msg_type,
            size_bytes: frame.len() * transmissions as usize,
            frame_bytes: frame.len(),
            transmissions,
            t_sent,
            t_response_received: answered,
        };
        st.log.push(entry.clone());
        if answered.is_none() && self.cfg.reliable {
            return Err(NetError::DeliveryFailure { id, attempts: transmissions });
        }
        Ok(entry)
    }

    /// Next delivered datagram, waiting up to `timeout`.
    pub fn recv(&self, timeout: Duration) -> Option<Datagram> {
        let deadline = Instant::now() + timeout;
        let mut st = self.shared.state.lock().unwrap();
        loop {
            if let Some(d) = st.inbox.pop_front() {
                return Some(d);
            }
            let now = Instant::now();
            if now >= deadline || self.shared.shutdown.load(Ordering::SeqCst) {
                return None;
            }
            st = self.shared.inbox_cv.wait_timeout(st, deadline - now).unwrap().0;
        }
    }

    pub fn delay_log(&self) -> Vec<DelayLogEntry> {
        self.shared.state.lock().unwrap().log.clone()
    }

    pub fn late_responses(&self) -> Vec<LateResponse> {
        self.shared.state.lock().unwrap().late.clone()
    }

    pub fn counters(&self) -> TrafficCounters {
        self.shared.state.lock().unwrap().counters
    }

    /// Stops the receive thread. Later sends fail with [`NetError::Closed`].
    pub fn shutdown(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        self.shared.inbox_cv.notify_all();
        self.shared.response_cv.notify_all();
        if let Some(rx) = self.rx.take() {
            let _ = rx.join();
        }
    }
}

impl Drop for Endpoint {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn receive_loop(shared: &Shared) {
    while !shared.shutdown.load(Ordering::SeqCst) {
        let bytes = match shared.transport.recv(RX_POLL) {
            Ok(Some(b)) => b,
            Ok(None) => continue,
            Err(_) => {
                std::thread::sleep(RX_POLL);
                continue;
            }
        };
        let d = match decode(&bytes) {
            Ok(d) => d,
            Err(_) => {
                shared.state.lock().unwrap().counters.corrupt_received += 1;
                continue;
            }
        };
        if d.msg_type == MsgType::Response {
            let t = shared.now();
            let mut st = shared.state.lock().unwrap();
            st.counters.responses_received += 1;
            match d.acked_id().and_then(|id| st.in_flight.get_mut(&id).map(|slot| (id, slot))) {
                Some((_, slot)) if slot.is_none() => {
                    *slot = Some(t);
                    shared.response_cv.notify_all();
                }
                // a second echo for an id still in flight: already completed
                Some(_) => {}
                None => {
                    let id = d.acked_id().unwrap_or(d.id);
                    st.late.push(LateResponse { datagram_id: id, t_received: t });
                }
            }
            continue;
        }
        let ack = encode(&Datagram::response_to(d.id)).expect("response fits");
        let _ = shared.transport.send(&ack);
        let mut st = shared.state.lock().unwrap();
        st.counters.responses_sent += 1;
        st.counters.response_bytes_sent += ack.len() as u64;
        st.counters.data_frames_received += 1;
        if st.seen.insert(d.id) {
            st.inbox.push_back(d);
            shared.inbox_cv.notify_all();
        } else {
            st.counters.duplicates_received += 1;
        }
    }
}
