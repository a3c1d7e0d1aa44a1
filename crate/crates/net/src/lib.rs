//! Datagram protocol between the robot and human sides: bit-exact frames,
//! typed payloads, stop-and-wait delivery with id-echo responses, a link
//! impairment simulator and round-trip accounting.

pub mod endpoint;
pub mod frame;
pub mod impair;
pub mod payload;
pub mod stats;
pub mod transport;

pub use endpoint::{DelayLogEntry, Endpoint, EndpointConfig, LateResponse, NetError, TrafficCounters};
pub use frame::{decode, encode, Datagram, FrameError, MsgType};
pub use impair::{ImpairedTransport, ImpairmentConfig};
pub use stats::{compute_stats, write_delay_csv, DelayStats};
pub use transport::{MemoryTransport, Transport, UdpTransport};
