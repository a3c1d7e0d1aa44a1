//! Typed payloads carried inside frames. Floats are f32, everything is
//! little-endian.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::MAX_PAYLOAD;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PayloadError {
    #[error("{count} items exceed the per-datagram limit of {max}; split into batches")]
    SplitRequired { count: usize, max: usize },
    #[error("malformed {kind} payload: {reason}")]
    Malformed { kind: &'static str, reason: String },
    #[error("invalid value: {0}")]
    Invalid(String),
}

fn malformed(kind: &'static str, reason: impl Into<String>) -> PayloadError {
    PayloadError::Malformed { kind, reason: reason.into() }
}

/// Cursor over a payload with bounds-checked little-endian reads.
struct Reader<'a> {
    kind: &'static str,
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn new(kind: &'static str, buf: &'a [u8]) -> Self {
        Self { kind, buf, at: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], PayloadError> {
        if self.buf.len() - self.at < n {
            return Err(malformed(self.kind, format!("need {n} more bytes at offset {}", self.at)));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, PayloadError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, PayloadError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, PayloadError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, PayloadError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.at..];
        self.at = self.buf.len();
        s
    }

    fn finish(self) -> Result<(), PayloadError> {
        if self.at != self.buf.len() {
            return Err(malformed(self.kind, format!("{} trailing bytes", self.buf.len() - self.at)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WirePoint {
    pub id: u32,
    /// `{c0}` odometry units.
    pub xyz: [f32; 3],
}

pub const MAP_POINT_BYTES: usize = 16;
pub const MAX_MAP_POINTS: usize = (MAX_PAYLOAD - 2) / MAP_POINT_BYTES;

/// `count: u16` then `id: u32, x, y, z: f32` per point.
pub fn encode_map_points(points: &[WirePoint]) -> Result<Vec<u8>, PayloadError> {
    if points.len() > MAX_MAP_POINTS {
        return Err(PayloadError::SplitRequired { count: points.len(), max: MAX_MAP_POINTS });
    }
    let mut out = Vec::with_capacity(2 + points.len() * MAP_POINT_BYTES);
    out.extend_from_slice(&(points.len() as u16).to_le_bytes());
    for p in points {
        out.extend_from_slice(&p.id.to_le_bytes());
        for v in p.xyz {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_map_points(payload: &[u8]) -> Result<Vec<WirePoint>, PayloadError> {
    let mut r = Reader::new("MAP_POINTS", payload);
    let n = r.u16()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(WirePoint { id: r.u32()?, xyz: [r.f32()?, r.f32()?, r.f32()?] });
    }
    r.finish()?;
    Ok(out)
}

/// Camera pose of one keyframe, `c0 <- ci`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WirePose {
    pub keyframe: u32,
    pub translation: [f32; 3],
    /// x, y, z, w
    pub quaternion: [f32; 4],
}

pub const POSE_BYTES: usize = 4 + 7 * 4;
pub const MAX_POSES: usize = (MAX_PAYLOAD - 2) / POSE_BYTES;

pub fn encode_poses(poses: &[WirePose]) -> Result<Vec<u8>, PayloadError> {
    if poses.len() > MAX_POSES {
        return Err(PayloadError::SplitRequired { count: poses.len(), max: MAX_POSES });
    }
    let mut out = Vec::with_capacity(2 + poses.len() * POSE_BYTES);
    out.extend_from_slice(&(poses.len() as u16).to_le_bytes());
    for p in poses {
        out.extend_from_slice(&p.keyframe.to_le_bytes());
        for v in p.translation.iter().chain(&p.quaternion) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_poses(payload: &[u8]) -> Result<Vec<WirePose>, PayloadError> {
    let mut r = Reader::new("POSE", payload);
    let n = r.u16()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let keyframe = r.u32()?;
        let translation = [r.f32()?, r.f32()?, r.f32()?];
        let quaternion = [r.f32()?, r.f32()?, r.f32()?, r.f32()?];
        out.push(WirePose { keyframe, translation, quaternion });
    }
    r.finish()?;
    Ok(out)
}

/// Orientation presets are numbered 0 to 3.
pub const MAX_PRESET: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoarseTaskWire {
    /// `{c0}` odometry units.
    pub target: [f32; 3],
    pub preset: u8,
}

pub fn encode_coarse_task(t: &CoarseTaskWire) -> Result<Vec<u8>, PayloadError> {
    if t.preset > MAX_PRESET {
        return Err(PayloadError::Invalid(format!("preset {} out of range 0..={MAX_PRESET}", t.preset)));
    }
    let mut out = Vec::with_capacity(13);
    for v in t.target {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(t.preset);
    Ok(out)
}

pub fn decode_coarse_task(payload: &[u8]) -> Result<CoarseTaskWire, PayloadError> {
    let mut r = Reader::new("TASK_COARSE", payload);
    let t = CoarseTaskWire { target: [r.f32()?, r.f32()?, r.f32()?], preset: r.u8()? };
    r.finish()?;
    if t.preset > MAX_PRESET {
        return Err(PayloadError::Invalid(format!("preset {} out of range 0..={MAX_PRESET}", t.preset)));
    }
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinePairWire {
    pub feature_id: u32,
    pub u: f32,
    pub v: f32,
    pub u_star: f32,
    pub v_star: f32,
}

pub const MAX_FINE_PAIRS: usize = 8;

pub fn encode_fine_task(pairs: &[FinePairWire]) -> Result<Vec<u8>, PayloadError> {
    if pairs.is_empty() {
        return Err(PayloadError::Invalid("a fine task needs at least one pair".into()));
    }
    if pairs.len() > MAX_FINE_PAIRS {
        return Err(PayloadError::SplitRequired { count: pairs.len(), max: MAX_FINE_PAIRS });
    }
    let mut out = Vec::with_capacity(1 + pairs.len() * 20);
    out.push(pairs.len() as u8);
    for p in pairs {
        out.extend_from_slice(&p.feature_id.to_le_bytes());
        for v in [p.u, p.v, p.u_star, p.v_star] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_fine_task(payload: &[u8]) -> Result<Vec<FinePairWire>, PayloadError> {
    let mut r = Reader::new("TASK_FINE", payload);
    let n = r.u8()? as usize;
    if n == 0 || n > MAX_FINE_PAIRS {
        return Err(malformed("TASK_FINE", format!("pair count {n}")));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(FinePairWire { feature_id: r.u32()?, u: r.f32()?, v: r.f32()?, u_star: r.f32()?, v_star: r.f32()? });
    }
    r.finish()?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusWire {
    pub phase: u8,
    pub detail: String,
}

/// Phase code a human side uses to ask the robot to stop.
pub const STATUS_ABORT: u8 = 0xFF;

/// `phase: u8`, `len: u16`, UTF-8 detail. Long details are cut at a
/// character boundary to fit one datagram.
pub fn encode_status(s: &StatusWire) -> Vec<u8> {
    let max = MAX_PAYLOAD - 3;
    let mut end = s.detail.len().min(max);
    while !s.detail.is_char_boundary(end) {
        end -= 1;
    }
    let detail = &s.detail.as_bytes()[..end];
    let mut out = Vec::with_capacity(3 + detail.len());
    out.push(s.phase);
    out.extend_from_slice(&(detail.len() as u16).to_le_bytes());
    out.extend_from_slice(detail);
    out
}

pub fn decode_status(payload: &[u8]) -> Result<StatusWire, PayloadError> {
    let mut r = Reader::new("STATUS", payload);
    let phase = r.u8()?;
    let n = r.u16()? as usize;
    let detail = std::str::from_utf8(r.take(n)?).map_err(|e| malformed("STATUS", e.to_string()))?.to_string();
    r.finish()?;
    Ok(StatusWire { phase, detail })
}

pub const CHUNK_HEADER_BYTES: usize = 10;
pub const MAX_CHUNK_DATA: usize = MAX_PAYLOAD - CHUNK_HEADER_BYTES;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageChunk {
    pub image_id: u16,
    pub chunk_index: u16,
    pub total_chunks: u16,
    pub width: u16,
    pub height: u16,
    pub data: Vec<u8>,
}

pub fn encode_image_chunk(c: &ImageChunk) -> Result<Vec<u8>, PayloadError> {
    if c.data.len() > MAX_CHUNK_DATA {
        return Err(PayloadError::SplitRequired { count: c.data.len(), max: MAX_CHUNK_DATA });
    }
    let mut out = Vec::with_capacity(CHUNK_HEADER_BYTES + c.data.len());
    for v in [c.image_id, c.chunk_index, c.total_chunks, c.width, c.height] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&c.data);
    Ok(out)
}

pub fn decode_image_chunk(payload: &[u8]) -> Result<ImageChunk, PayloadError> {
    let mut r = Reader::new("IMAGE_CHUNK", payload);
    let (image_id, chunk_index, total_chunks, width, height) = (r.u16()?, r.u16()?, r.u16()?, r.u16()?, r.u16()?);
    if total_chunks == 0 || chunk_index >= total_chunks {
        return Err(malformed("IMAGE_CHUNK", format!("chunk {chunk_index} of {total_chunks}")));
    }
    Ok(ImageChunk { image_id, chunk_index, total_chunks, width, height, data: r.rest().to_vec() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WireAnnotation {
    pub id: u32,
    pub u: f32,
    pub v: f32,
}

/// An image plus its feature annotations, as one byte blob:
/// `pgm_len: u32 | pgm | count: u16 | (id: u32, u: f32, v: f32)*`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBlob {
    pub pgm: Vec<u8>,
    pub annotations: Vec<WireAnnotation>,
}

impl ImageBlob {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + self.pgm.len() + 12 * self.annotations.len());
        out.extend_from_slice(&(self.pgm.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.pgm);
        out.extend_from_slice(&(self.annotations.len() as u16).to_le_bytes());
        for a in &self.annotations {
            out.extend_from_slice(&a.id.to_le_bytes());
            out.extend_from_slice(&a.u.to_le_bytes());
            out.extend_from_slice(&a.v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PayloadError> {
        let mut r = Reader::new("image blob", bytes);
        let n = r.u32()? as usize;
        let pgm = r.take(n)?.to_vec();
        let count = r.u16()? as usize;
        let mut annotations = Vec::with_capacity(count);
        for _ in 0..count {
            annotations.push(WireAnnotation { id: r.u32()?, u: r.f32()?, v: r.f32()? });
        }
        r.finish()?;
        Ok(Self { pgm, annotations })
    }

    /// Splits the blob into IMAGE_CHUNK payloads.
    pub fn chunks(&self, image_id: u16, width: u16, height: u16) -> Result<Vec<ImageChunk>, PayloadError> {
        let bytes = self.to_bytes();
        let total = bytes.len().div_ceil(MAX_CHUNK_DATA).max(1);
        if total > u16::MAX as usize {
            return Err(PayloadError::SplitRequired { count: total, max: u16::MAX as usize });
        }
        Ok((0..total)
            .map(|i| ImageChunk {
                image_id,
                chunk_index: i as u16,
                total_chunks: total as u16,
                width,
                height,
                data: bytes[i * MAX_CHUNK_DATA..((i + 1) * MAX_CHUNK_DATA).min(bytes.len())].to_vec(),
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssembledImage {
    pub image_id: u16,
    pub width: u16,
    pub height: u16,
    pub blob: ImageBlob,
}

#[derive(Debug)]
struct Partial {
    total: u16,
    width: u16,
    height: u16,
    parts: Vec<Option<Vec<u8>>>,
    have: usize,
}

/// Collects chunks in any order, ignoring repeats, and yields each image
/// once when its last missing chunk arrives.
#[derive(Debug, Default)]
pub struct ImageAssembler {
    partial: HashMap<u16, Partial>,
}

impl ImageAssembler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, chunk: ImageChunk) -> Result<Option<AssembledImage>, PayloadError> {
        let entry = self.partial.entry(chunk.image_id).or_insert_with(|| Partial {
            total: chunk.total_chunks,
            width: chunk.width,
            height: chunk.height,
            parts: vec![None; chunk.total_chunks as usize],
            have: 0,
        });
        if entry.total != chunk.total_chunks || entry.width != chunk.width || entry.height != chunk.height {
            return Err(malformed("IMAGE_CHUNK", format!("inconsistent header for image {}", chunk.image_id)));
        }
        let slot = &mut entry.parts[chunk.chunk_index as usize];
        if slot.is_none() {
            *slot = Some(chunk.data);
            entry.have += 1;
        }
        if entry.have < entry.total as usize {
            return Ok(None);
        }
        let done = self.partial.remove(&chunk.image_id).expect("entry exists");
        let bytes: Vec<u8> = done.parts.into_iter().flat_map(|p| p.expect("all parts present")).collect();
        Ok(Some(AssembledImage { image_id: chunk.image_id, width: done.width, height: done.height, blob: ImageBlob::from_bytes(&bytes)? }))
    }

    pub fn pending(&self) -> usize {
        self.partial.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn map_point_layout() {
        assert_eq!(encode_map_points(&[]).unwrap(), vec![0, 0]);
        let one = encode_map_points(&[WirePoint { id: 7, xyz: [1.0, 0.0, 0.0] }]).unwrap();
        assert_eq!(one, vec![1, 0, 7, 0, 0, 0, 0x00, 0x00, 0x80, 0x3F, 0, 0, 0, 0, 0, 0, 0, 0]);
        let two = encode_map_points(&[WirePoint { id: 1, xyz: [0.0; 3] }; 2]).unwrap();
        assert_eq!(two.len(), 2 + 2 * 16);
        assert_eq!(MAX_MAP_POINTS, 63);
        let full = vec![WirePoint { id: 1, xyz: [0.5; 3] }; 63];
        assert!(encode_map_points(&full).unwrap().len() <= MAX_PAYLOAD);
        let over = vec![WirePoint { id: 1, xyz: [0.5; 3] }; 64];
        assert_eq!(encode_map_points(&over), Err(PayloadError::SplitRequired { count: 64, max: 63 }));
        assert!(decode_map_points(&one[..17]).is_err());
    }

    #[test]
    fn coarse_task_layout_and_presets() {
        let t = CoarseTaskWire { target: [0.25, -1.5, 3.0], preset: 2 };
        let bytes = encode_coarse_task(&t).unwrap();
        assert_eq!(bytes.len(), 13);
        assert_eq!(decode_coarse_task(&bytes).unwrap(), t);
        assert!(encode_coarse_task(&CoarseTaskWire { preset: 4, ..t }).is_err());
        let mut bad = bytes.clone();
        bad[12] = 9;
        assert!(decode_coarse_task(&bad).is_err());
    }

    #[test]
    fn fine_task_limits() {
        let p = FinePairWire { feature_id: 7, u: 120.0, v: 88.0, u_star: 320.0, v_star: 240.0 };
        let bytes = encode_fine_task(&[p]).unwrap();
        assert_eq!(bytes.len(), 21);
        assert_eq!(decode_fine_task(&bytes).unwrap(), vec![p]);
        assert!(encode_fine_task(&[]).is_err());
        assert!(encode_fine_task(&[p; 9]).is_err());
        assert!(decode_fine_task(&[0]).is_err());
    }

    #[test]
    fn status_truncates_on_char_boundary() {
        let s = StatusWire { phase: 3, detail: "é".repeat(600) };
        let bytes = encode_status(&s);
        assert!(bytes.len() <= MAX_PAYLOAD);
        let back = decode_status(&bytes).unwrap();
        assert!(s.detail.starts_with(&back.detail));
        assert_eq!(back.detail.len() % 2, 0);
        let short = StatusWire { phase: 1, detail: "EXPLORING".into() };
        assert_eq!(decode_status(&encode_status(&short)).unwrap(), short);
    }

    #[test]
    fn image_reassembly_out_of_order_with_duplicates() {
        let pgm: Vec<u8> = (0..(64 * 64 + 13)).map(|i| (i % 251) as u8).collect();
        let blob = ImageBlob { pgm, annotations: vec![WireAnnotation { id: 3, u: 10.5, v: 20.25 }] };
        let chunks = blob.chunks(5, 64, 64).unwrap();
        assert!(chunks.len() > 1);
        let mut asm = ImageAssembler::new();
        let mut out = None;
        let order = chunks[1..].iter().rev().flat_map(|c| [c, c]).chain(std::iter::once(&chunks[0]));
        for c in order {
            let payload = encode_image_chunk(c).unwrap();
            assert!(payload.len() <= MAX_PAYLOAD);
            if let Some(img) = asm.add(decode_image_chunk(&payload).unwrap()).unwrap() {
                assert!(out.is_none(), "image yielded twice");
                out = Some(img);
            }
        }
        assert_eq!(asm.pending(), 0);
        let img = out.unwrap();
        assert_eq!((img.image_id, img.width, img.height), (5, 64, 64));
        assert_eq!(img.blob, blob);
    }

    proptest! {
        #[test]
        fn map_points_round_trip(pts in proptest::collection::vec((any::<u32>(), -10f32..10.0, -10f32..10.0, -10f32..10.0), 0..=63)) {
            let pts: Vec<WirePoint> = pts.into_iter().map(|(id, x, y, z)| WirePoint { id, xyz: [x, y, z] }).collect();
            prop_assert_eq!(decode_map_points(&encode_map_points(&pts).unwrap()).unwrap(), pts);
        }

        #[test]
        fn poses_round_trip(n in 0usize..=MAX_POSES, k in any::<u32>(), v in -5f32..5.0) {
            let poses: Vec<WirePose> = (0..n).map(|i| WirePose { keyframe: k.wrapping_add(i as u32), translation: [v, -v, 1.0], quaternion: [0.0, 0.0, 0.0, 1.0] }).collect();
            let bytes = encode_poses(&poses).unwrap();
            prop_assert!(bytes.len() <= MAX_PAYLOAD);
            prop_assert_eq!(decode_poses(&bytes).unwrap(), poses);
        }

        #[test]
        fn blob_round_trip(pgm in proptest::collection::vec(any::<u8>(), 0..3000), n in 0u32..20) {
            let blob = ImageBlob { pgm, annotations: (0..n).map(|i| WireAnnotation { id: i, u: i as f32, v: 0.5 }).collect() };
            prop_assert_eq!(ImageBlob::from_bytes(&blob.to_bytes()).unwrap(), blob);
        }
    }
}
