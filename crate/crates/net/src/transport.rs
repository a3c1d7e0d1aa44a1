use std::io;
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::sync::Mutex;
use std::time::Duration;

use crate::frame::MAX_FRAME;

/// Unreliable datagram pipe to a single peer.
pub trait Transport: Send + Sync {
    fn send(&self, frame: &[u8]) -> io::Result<()>;
    /// Next datagram, or `None` if nothing arrived within `timeout`.
    fn recv(&self, timeout: Duration) -> io::Result<Option<Vec<u8>>>;
}

impl<T: Transport + ?Sized> Transport for std::sync::Arc<T> {
    fn send(&self, frame: &[u8]) -> io::Result<()> {
        (**self).send(frame)
    }
    fn recv(&self, timeout: Duration) -> io::Result<Option<Vec<u8>>> {
        (**self).recv(timeout)
    }
}

/// UDP socket bound to a local address. The peer is either given up front
/// or learned from the first datagram received.
#[derive(Debug)]
pub struct UdpTransport {
    socket: UdpSocket,
    peer: Mutex<Option<SocketAddr>>,
}

impl UdpTransport {
    pub fn bind(local: impl ToSocketAddrs) -> io::Result<Self> {
        Ok(Self { socket: UdpSocket::bind(local)?, peer: Mutex::new(None) })
    }

    pub fn bind_to_peer(local: impl ToSocketAddrs, peer: impl ToSocketAddrs) -> io::Result<Self> {
        let t = Self::bind(local)?;
        let addr = peer.to_socket_addrs()?.next().ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "no peer address"))?;
        t.set_peer(addr);
        Ok(t)
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.socket.local_addr()
    }

    pub fn set_peer(&self, peer: SocketAddr) {
        *self.peer.lock().unwrap() = Some(peer);
    }

    pub fn peer(&self) -> Option<SocketAddr> {
        *self.peer.lock().unwrap()
    }
}

impl Transport for UdpTransport {
    fn send(&self, frame: &[u8]) -> io::Result<()> {
        let peer = self.peer().ok_or_else(|| io::Error::new(io::ErrorKind::NotConnected, "peer address not known yet"))?;
        match self.socket.send_to(frame, peer) {
            Ok(_) => Ok(()),
            // an absent peer on loopback shows up as a refused send; that is
            // packet loss from the protocol's point of view
            Err(e) if e.kind() == io::ErrorKind::ConnectionRefused => Ok(()),
            Err(e) => Err(e),
        }
    }

    fn recv(&self, timeout: Duration) -> io::Result<Option<Vec<u8>>> {
        self.socket.set_read_timeout(Some(timeout.max(Duration::from_millis(1))))?;
        let mut buf = vec![0u8; MAX_FRAME + 64];
        match self.socket.recv_from(&mut buf) {
            Ok((n, from)) => {
                let mut peer = self.peer.lock().unwrap();
                if peer.is_none() {
                    *peer = Some(from);
                }
                buf.truncate(n);
                Ok(Some(buf))
            }
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut | io::ErrorKind::ConnectionRefused) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

/// In-process datagram pipe, one end of a pair.
#[derive(Debug)]
pub struct MemoryTransport {
    tx: Mutex<Sender<Vec<u8>>>,
    rx: Mutex<Receiver<Vec<u8>>>,
}

impl MemoryTransport {
    pub fn pair() -> (MemoryTransport, MemoryTransport) {
        let (a_tx, b_rx) = channel();
        let (b_tx, a_rx) = channel();
        (
            MemoryTransport { tx: Mutex::new(a_tx), rx: Mutex::new(a_rx) },
            MemoryTransport { tx: Mutex::new(b_tx), rx: Mutex::new(b_rx) },
        )
    }
}

impl Transport for MemoryTransport {
    fn send(&self, frame: &[u8]) -> io::Result<()> {
        // a closed far end behaves like a peer that went away: drop silently
        let _ = self.tx.lock().unwrap().send(frame.to_vec());
        Ok(())
    }

    fn recv(&self, timeout: Duration) -> io::Result<Option<Vec<u8>>> {
        match self.rx.lock().unwrap().recv_timeout(timeout) {
            Ok(f) => Ok(Some(f)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => {
                std::thread::sleep(timeout);
                Ok(None)
            }
        }
    }
}
