use std::collections::{BTreeMap, HashSet};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SimError;

/// Axis-aligned box, meters in `{b}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

fn background_tag() -> String {
    BACKGROUND_TAG.to_string()
}

pub const BACKGROUND_TAG: &str = "background";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: u32,
    /// Meters in `{b}`.
    #[serde(rename = "xyz")]
    pub position: Vector3<f64>,
    /// Object the landmark belongs to.
    #[serde(default = "background_tag")]
    pub tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub landmarks: Vec<Landmark>,
    pub targets: BTreeMap<String, Vector3<f64>>,
    pub workspace: Aabb,
}

impl Scene {
    pub fn new(landmarks: Vec<Landmark>, targets: BTreeMap<String, Vector3<f64>>, workspace: Aabb) -> Result<Self, SimError> {
        let scene = Self { landmarks, targets, workspace };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let mut ids = HashSet::new();
        for l in &self.landmarks {
            if !ids.insert(l.id) {
                return Err(SimError::InvalidScene(format!("duplicate landmark id {}", l.id)));
            }
            if !self.workspace.contains(&l.position) {
                return Err(SimError::InvalidScene(format!("landmark {} outside workspace", l.id)));
            }
        }
        for (name, p) in &self.targets {
            if !self.workspace.contains(p) {
                return Err(SimError::InvalidScene(format!("target {name:?} outside workspace")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let scene: Scene = serde_json::from_str(text).map_err(|e| SimError::InvalidScene(e.to_string()))?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    pub fn landmark(&self, id: u32) -> Option<&Landmark> {
        self.landmarks.iter().find(|l| l.id == id)
    }

    pub fn target(&self, name: &str) -> Option<Vector3<f64>> {
        self.targets.get(name).copied()
    }

    pub fn landmarks_tagged<'a>(&'a self, tag: &'a str) -> impl Iterator<Item = &'a Landmark> + 'a {
        self.landmarks.iter().filter(move |l| l.tag == tag)
    }

    /// Landmark closest to a point.
    pub fn nearest_landmark(&self, p: &Vector3<f64>) -> Option<&Landmark> {
        self.landmarks
            .iter()
            .min_by(|a, b| (a.position - p).norm_squared().total_cmp(&(b.position - p).norm_squared()))
    }

    /// Handle task: 8 landmarks in two rows on a 6 cm bar facing `-x`, plus
    /// the grasp point at the bar center.
    pub fn handle() -> Scene {
        let bar = Vector3::new(0.45, -0.05, 0.10);
        let mut landmarks = Vec::new();
        let mut id = 0;
        for dz in [0.0, 0.015] {
            for dy in [-0.03, -0.01, 0.01, 0.03] {
                landmarks.push(Landmark { id, position: bar + Vector3::new(0.0, dy, dz), tag: "handle".into() });
                id += 1;
            }
        }
        let grasp = bar + Vector3::new(0.0, 0.0, 0.0075);
        Self::with_background(landmarks, "handle_grasp", grasp)
    }

    /// Button task: a center landmark and four on the rim of a 2 cm disc.
    pub fn button() -> Scene {
        let center = Vector3::new(0.55, 0.05, 0.03);
        let mut landmarks = vec![Landmark { id: 0, position: center, tag: "button".into() }];
        for k in 0..4 {
            let a = k as f64 * std::f64::consts::FRAC_PI_2 + std::f64::consts::FRAC_PI_4;
            landmarks.push(Landmark {
                id: k + 1,
                position: center + Vector3::new(0.01 * a.cos(), 0.01 * a.sin(), 0.0),
                tag: "button".into(),
            });
        }
        Self::with_background(landmarks, "button_center", center)
    }

    fn with_background(mut landmarks: Vec<Landmark>, target: &str, target_pos: Vector3<f64>) -> Scene {
        // fixed layout seed: the scene is the same for every trial
        let mut rng = ChaCha8Rng::seed_from_u64(0x5CE4E);
        let mut id = 100;
        while landmarks.len() < 56 {
            let p = Vector3::new(rng.random_range(0.30..0.70), rng.random_range(-0.20..0.20), rng.random_range(0.0..0.08));
            if landmarks.iter().any(|l| (l.position - p).norm() < 0.03) || (p - target_pos).norm() < 0.05 {
                continue;
            }
            landmarks.push(Landmark { id, position: p, tag: BACKGROUND_TAG.into() });
            id += 1;
        }
        let mut targets = BTreeMap::new();
        targets.insert(target.to_string(), target_pos);
        Scene::new(landmarks, targets, default_workspace()).expect("preset scene is valid")
    }

    /// Centroid of all landmarks.
    pub fn center(&self) -> Vector3<f64> {
        let n = self.landmarks.len().max(1) as f64;
        self.landmarks.iter().map(|l| l.position).sum::<Vector3<f64>>() / n
    }
}

pub fn default_workspace() -> Aabb {
    Aabb::new(Vector3::new(0.0, -0.5, -0.05), Vector3::new(1.0, 0.5, 0.9))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for scene in [Scene::handle(), Scene::button()] {
            scene.validate().unwrap();
            assert!(scene.landmarks_tagged(BACKGROUND_TAG).count() >= 40);
        }
        assert_eq!(Scene::handle().landmarks_tagged("handle").count(), 8);
        assert_eq!(Scene::button().landmarks_tagged("button").count(), 5);
        assert_eq!(Scene::button(), Scene::button());
    }

    #[test]
    fn json_round_trip_and_validation() {
        let s = Scene::button();
        assert_eq!(Scene::from_json(&s.to_json()).unwrap(), s);
        let text = r#"{"landmarks":[{"id":1,"xyz":[0.5,0,0]},{"id":1,"xyz":[0.4,0,0]}],
                       "targets":{"t":[0.5,0,0]},"workspace":{"min":[0,-1,-1],"max":[1,1,1]}}"#;
        assert!(matches!(Scene::from_json(text), Err(SimError::InvalidScene(_))));
        let outside = r#"{"landmarks":[{"id":1,"xyz":[5,0,0]}],"targets":{},"workspace":{"min":[0,-1,-1],"max":[1,1,1]}}"#;
        assert!(Scene::from_json(outside).is_err());
        let ok = r#"{"landmarks":[{"id":3,"xyz":[0.5,0,0]}],"targets":{"t":[0.5,0,0]},"workspace":{"min":[0,-1,-1],"max":[1,1,1]}}"#;
        assert_eq!(Scene::from_json(ok).unwrap().landmarks[0].tag, BACKGROUND_TAG);
    }
}
