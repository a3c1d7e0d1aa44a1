//! Feature-marker raster standing in for camera images.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use super::scene::Scene;
use super::vo::NEAR_PLANE;
use super::SimError;
use crate::geometry::{CameraIntrinsics, Pose};

pub const MARKER_SIZE: i64 = 5;
pub const MARKER_INTENSITY: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureAnnotation {
    pub id: u32,
    pub u: f64,
    pub v: f64,
}

impl FeatureAnnotation {
    pub fn pixel(&self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub width: u32,
    pub height: u32,
    /// Row-major 8-bit grayscale.
    pub pixels: Vec<u8>,
    /// Exact projected centers of rendered landmarks, ascending id.
    pub feature_annotations: Vec<FeatureAnnotation>,
}

impl SyntheticImage {
    pub fn blank(width: u32, height: u32) -> Self {
        Self { width, height, pixels: vec![0; (width * height) as usize], feature_annotations: Vec::new() }
    }

    pub fn pixel(&self, x: u32, y: u32) -> u8 {
        self.pixels[(y * self.width + x) as usize]
    }

    pub fn annotation(&self, id: u32) -> Option<&FeatureAnnotation> {
        self.feature_annotations.iter().find(|a| a.id == id)
    }

    /// Binary PGM (P5, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Parses a binary P5 PGM with maxval 255. Annotations are not part of
    /// the file and come back empty.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self, SimError> {
        let bad = |m: &str| SimError::InvalidImage(m.to_string());
        let mut fields = Vec::new();
        let mut i = 0;
        while fields.len() < 4 {
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if i < bytes.len() && bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
                continue;
            }
            let start = i;
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if start == i {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("non-ascii header"))?.to_string());
        }
        // exactly one whitespace byte separates the header from the raster
        i += 1;
        if fields[0] != "P5" {
            return Err(bad("not a P5 file"));
        }
        let width: u32 = fields[1].parse().map_err(|_| bad("bad width"))?;
        let height: u32 = fields[2].parse().map_err(|_| bad("bad height"))?;
        if fields[3] != "255" {
            return Err(bad("only maxval 255 is supported"));
        }
        let n = (width as usize) * (height as usize);
        if bytes.len() < i + n {
            return Err(bad("truncated raster"));
        }
        Ok(Self { width, height, pixels: bytes[i..i + n].to_vec(), feature_annotations: Vec::new() })
    }
}

/// Renders every landmark in front of the camera whose projection lands
/// inside the image as a 5x5 bright square centered on the rounded pixel.
pub fn render_image(scene: &Scene, cam_in_base: &Pose, k: &CameraIntrinsics) -> SyntheticImage {
    let mut img = SyntheticImage::blank(k.width, k.height);
    let base_to_cam = cam_in_base.inverse();
    let mut visible: Vec<FeatureAnnotation> = scene
        .landmarks
        .iter()
        .filter_map(|l| {
            let p = base_to_cam.transform_point(&l.position);
            if p.z <= NEAR_PLANE {
                return None;
            }
            let px = k.project(&p).ok()?;
            k.contains(&px).then_some(FeatureAnnotation { id: l.id, u: px.x, v: px.y })
        })
        .collect();
    visible.sort_by_key(|a| a.id);
    let half = MARKER_SIZE / 2;
    for a in &visible {
        let (cu, cv) = (a.u.round() as i64, a.v.round() as i64);
        for y in (cv - half)..=(cv + half) {
            for x in (cu - half)..=(cu + half) {
                if x >= 0 && y >= 0 && x < k.width as i64 && y < k.height as i64 {
                    img.pixels[(y as usize) * k.width as usize + x as usize] = MARKER_INTENSITY;
                }
            }
        }
    }
    img.feature_annotations = visible;
    img
}
