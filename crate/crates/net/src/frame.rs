//! Frame layout (all little-endian):
//!
//! ```text
//! 0   u32  magic 0x54435446
//! 4   u8   version (1)
//! 5   u8   msg_type
//! 6   u16  reserved, zero
//! 8   u32  datagram_id
//! 12  u32  payload_len
//! 16  ..   payload
//! ..  u32  crc32 of every preceding byte
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: u32 = 0x5443_5446;
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 16;
pub const CRC_LEN: usize = 4;
pub const MAX_PAYLOAD: usize = 1024;
pub const MAX_FRAME: usize = HEADER_LEN + MAX_PAYLOAD + CRC_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum MsgType {
    Hello = 1,
    MapPoints = 2,
    Pose = 3,
    ImageChunk = 4,
    TaskCoarse = 5,
    TaskFine = 6,
    Status = 7,
    Response = 8,
}

impl MsgType {
    pub const ALL: [MsgType; 8] = [
        MsgType::Hello,
        MsgType::MapPoints,
        MsgType::Pose,
        MsgType::ImageChunk,
        MsgType::TaskCoarse,
        MsgType::TaskFine,
        MsgType::Status,
        MsgType::Response,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.iter().copied().find(|t| *t as u8 == v)
    }

    pub fn name(self) -> &'static str {
        match self {
            MsgType::Hello => "HELLO",
            MsgType::MapPoints => "MAP_POINTS",
            MsgType::Pose => "POSE",
            MsgType::ImageChunk => "IMAGE_CHUNK",
            MsgType::TaskCoarse => "TASK_COARSE",
            MsgType::TaskFine => "TASK_FINE",
            MsgType::Status => "STATUS",
            MsgType::Response => "RESPONSE",
        }
    }
}

impl std::fmt::Display for MsgType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD}-byte limit")]
    Oversize(usize),
    #[error("not a frame of this protocol (magic {0:#010x})")]
    NotOurs(u32),
    #[error("unsupported protocol version {0}")]
    BadVersion(u8),
    #[error("checksum mismatch")]
    Corrupt,
    #[error("truncated frame: have {have} bytes, need {need}")]
    Truncated { have: usize, need: usize },
    #[error("unknown message type {0}")]
    UnknownType(u8),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Datagram {
    pub msg_type: MsgType,
    pub id: u32,
    pub payload: Vec<u8>,
}

impl Datagram {
    pub fn new(msg_type: MsgType, id: u32, payload: Vec<u8>) -> Self {
        Self { msg_type, id, payload }
    }

    /// Size on the wire.
    pub fn frame_len(&self) -> usize {
        HEADER_LEN + self.payload.len() + CRC_LEN
    }

    /// Acknowledgement for data datagram `id`.
    pub fn response_to(id: u32) -> Self {
        Self { msg_type: MsgType::Response, id, payload: id.to_le_bytes().to_vec() }
    }

    /// The id a RESPONSE acknowledges, read from its payload.
    pub fn acked_id(&self) -> Option<u32> {
        (self.msg_type == MsgType::Response && self.payload.len() == 4)
            .then(|| u32::from_le_bytes(self.payload[..4].try_into().unwrap()))
    }
}

pub fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

pub fn encode(d: &Datagram) -> Result<Vec<u8>, FrameError> {
    if d.payload.len() > MAX_PAYLOAD {
        return Err(FrameError::Oversize(d.payload.len()));
    }
    let mut out = Vec::with_capacity(d.frame_len());
    out.extend_from_slice(&MAGIC.to_le_bytes());
    out.push(VERSION);
    out.push(d.msg_type as u8);
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&d.id.to_le_bytes());
    out.extend_from_slice(&(d.payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&d.payload);
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

/// Checks run in order: minimum length, magic, declared length, checksum,
/// version, type. UDP delivers datagrams whole, so a buffer whose size
/// disagrees with its length field is damaged and reported as corrupt;
/// truncation means shorter than the smallest possible frame.
pub fn decode(bytes: &[u8]) -> Result<Datagram, FrameError> {
    let min = HEADER_LEN + CRC_LEN;
    if bytes.len() >= 4 {
        let magic = u32_at(bytes, 0);
        if magic != MAGIC {
            return Err(FrameError::NotOurs(magic));
        }
    }
    if bytes.len() < min {
        return Err(FrameError::Truncated { have: bytes.len(), need: min });
    }
    let payload_len = u32_at(bytes, 12) as usize;
    if payload_len > MAX_PAYLOAD || bytes.len() != HEADER_LEN + payload_len + CRC_LEN {
        return Err(FrameError::Corrupt);
    }
    let body = &bytes[..bytes.len() - CRC_LEN];
    if crc32(body) != u32_at(bytes, body.len()) {
        return Err(FrameError::Corrupt);
    }
    if bytes[4] != VERSION {
        return Err(FrameError::BadVersion(bytes[4]));
    }
    let msg_type = MsgType::from_u8(bytes[5]).ok_or(FrameError::UnknownType(bytes[5]))?;
    Ok(Datagram { msg_type, id: u32_at(bytes, 8), payload: bytes[HEADER_LEN..HEADER_LEN + payload_len].to_vec() })
}
