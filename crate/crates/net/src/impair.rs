//! Software stand-in for a slow, lossy wide-area link.
//!
//! Impairment is applied on egress: each side wraps its own transport, so
//! the two directions are independent. A scheduler thread holds frames
//! until their delivery time and then hands them to the inner transport.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::io;
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transport::Transport;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpairmentConfig {
    /// Seconds.
    pub one_way_latency: f64,
    /// Seconds, uniform in `±jitter`.
    pub jitter: f64,
    pub loss_probability: f64,
    /// Bytes per second, 0 for unlimited.
    pub bandwidth_cap: f64,
    pub rng_seed: u64,
}

impl Default for ImpairmentConfig {
    fn default() -> Self {
        Self { one_way_latency: 0.0, jitter: 0.0, loss_probability: 0.0, bandwidth_cap: 0.0, rng_seed: 0 }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid impairment config: {0}")]
pub struct ImpairmentError(pub String);

impl ImpairmentConfig {
    pub fn latency(one_way_latency: f64) -> Self {
        Self { one_way_latency, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ImpairmentError> {
        let fail = |m: &str| Err(ImpairmentError(m.into()));
        if !(self.one_way_latency >= 0.0) || !self.one_way_latency.is_finite() {
            return fail("latency must be finite and non-negative");
        }
        if !(self.jitter >= 0.0 && self.jitter <= self.one_way_latency) {
            return fail("jitter must lie in [0, latency]");
        }
        if !(0.0..=1.0).contains(&self.loss_probability) {
            return fail("loss probability must lie in [0, 1]");
        }
        if !(self.bandwidth_cap >= 0.0) {
            return fail("bandwidth cap must be non-negative");
        }
        Ok(())
    }

    pub fn is_transparent(&self) -> bool {
        self.one_way_latency == 0.0 && self.jitter == 0.0 && self.loss_probability == 0.0 && self.bandwidth_cap == 0.0
    }

    /// Independent seed for one direction of a link.
    pub fn for_direction(&self, direction: u64) -> Self {
        Self { rng_seed: self.rng_seed ^ direction.wrapping_mul(0x9E37_79B9_7F4A_7C15), ..*self }
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImpairmentCounters {
    pub offered: u64,
    pub dropped: u64,
    pub delivered: u64,
}

struct Scheduled {
    at: Instant,
    seq: u64,
    frame: Vec<u8>,
}

impl PartialEq for Scheduled {
    fn eq(&self, o: &Self) -> bool {
        (self.at, self.seq) == (o.at, o.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(o.at, o.seq))
    }
}

struct Queue {
    heap: BinaryHeap<Reverse<Scheduled>>,
    rng: ChaCha8Rng,
    seq: u64,
    /// When the modeled link finishes serializing the last accepted frame.
    tx_free_at: Instant,
    counters: ImpairmentCounters,
    shutdown: bool,
}

struct Shared<T> {
    inner: T,
    cfg: ImpairmentConfig,
    queue: Mutex<Queue>,
    wake: Condvar,
}

/// Transport wrapper adding latency, jitter, loss and a bandwidth cap to
/// outgoing frames. Receiving is passed straight through.
pub struct ImpairedTransport<T: Transport + 'static> {
    shared: Arc<Shared<T>>,
    worker: Option<JoinHandle<()>>,
}

impl<T: Transport + 'static> ImpairedTransport<T> {
    pub fn new(inner: T, cfg: ImpairmentConfig) -> Result<Self, ImpairmentError> {
        cfg.validate()?;
        let shared = Arc::new(Shared {
            inner,
            cfg,
            queue: Mutex::new(Queue {
                heap: BinaryHeap::new(),
                rng: ChaCha8Rng::seed_from_u64(cfg.rng_seed),
                seq: 0,
                tx_free_at: Instant::now(),
                counters: ImpairmentCounters::default(),
                shutdown: false,
            }),
            wake: Condvar::new(),
        });
        let worker_shared = Arc::clone(&shared);
        let worker = std::thread::Builder::new()
            .name("impaired-link".into())
            .spawn(move || run_scheduler(&worker_shared))
            .expect("spawn impairment scheduler");
        Ok(Self { shared, worker: Some(worker) })
    }

    pub fn config(&self) -> &ImpairmentConfig {
        &self.shared.cfg
    }

    pub fn counters(&self) -> ImpairmentCounters {
        self.shared.queue.lock().unwrap().counters
    }

    pub fn inner(&self) -> &T {
        &self.shared.inner
    }
}

fn run_scheduler<T: Transport>(shared: &Shared<T>) {
    let mut q = shared.queue.lock().unwrap();
    loop {
        if q.shutdown {
            return;
        }
        let now = Instant::now();
        match q.heap.peek() {
            Some(Reverse(next)) if next.at <= now => {
                let Reverse(item) = q.heap.pop().unwrap();
                q.counters.delivered += 1;
                drop(q);
                // delivery failures are loss as far as the protocol cares
                let _ = shared.inner.send(&item.frame);
                q = shared.queue.lock().unwrap();
            }
            Some(Reverse(next)) => {
                let wait = next.at - now;
                q = shared.wake.wait_timeout(q, wait).unwrap().0;
            }
            None => q = shared.wake.wait(q).unwrap(),
        }
    }
}

impl<T: Transport + 'static> Transport for ImpairedTransport<T> {
    fn send(&self, frame: &[u8]) -> io::Result<()> {
        let cfg = &self.shared.cfg;
        if cfg.is_transparent() {
            let mut q = self.shared.queue.lock().unwrap();
            q.counters.offered += 1;
            q.counters.delivered += 1;
            drop(q);
            return self.shared.inner.send(frame);
        }
        let now = Instant::now();
        let mut q = self.shared.queue.lock().unwrap();
        q.counters.offered += 1;
        // draw loss and jitter for every frame so the random stream does not
        // depend on which frames were dropped
        let lost = q.rng.random::<f64>() < cfg.loss_probability;
        let jitter = if cfg.jitter > 0.0 { q.rng.random_range(-cfg.jitter..=cfg.jitter) } else { 0.0 };
        if lost {
            q.counters.dropped += 1;
            return Ok(());
        }
        let departs = if cfg.bandwidth_cap > 0.0 {
            let start = q.tx_free_at.max(now);
            let done = start + Duration::from_secs_f64(frame.len() as f64 / cfg.bandwidth_cap);
            q.tx_free_at = done;
            done
        } else {
            now
        };
        let at = departs + Duration::from_secs_f64((cfg.one_way_latency + jitter).max(0.0));
        let seq = q.seq;
        q.seq += 1;
        q.heap.push(Reverse(Scheduled { at, seq, frame: frame.to_vec() }));
        drop(q);
        self.shared.wake.notify_one();
        Ok(())
    }

    fn recv(&self, timeout: Duration) -> io::Result<Option<Vec<u8>>> {
        self.shared.inner.recv(timeout)
    }
}

impl<T: Transport + 'static> Drop for ImpairedTransport<T> {
    fn drop(&mut self) {
        self.shared.queue.lock().unwrap().shutdown = true;
        self.shared.wake.notify_all();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}
