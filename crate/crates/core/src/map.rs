//! Initial map handed to a downstream SLAM system.
//!
//! # File format
//!
//! `initial_map.json` is a single JSON object:
//!
//! ```json
//! {
//!   "header": {"version": 1, "gravity_magnitude": 9.81,
//!              "frame": "world-z-down-gravity-aligned",
//!              "units": {"length": "m", "time": "s", "angle": "rad"}},
//!   "keyframes": [{"index": 0, "frame": 0, "timestamp": 0.0,
//!                  "world_from_body": [16 row-major values],
//!                  "velocity": [0.0, 0.3, 0.1]}],
//!   "bias": {"gyro": [0.0, 0.0, 0.0], "accel": [0.0, 0.0, 0.0]},
//!   "points": [{"id": 7, "position": [4.0, 0.5, -0.2],
//!               "observations": [{"keyframe": 0, "u": 310.2, "v": 200.9}]}],
//!   "covisibility": [{"a": 0, "b": 1, "weight": 20}]
//! }
//! ```
//!
//! Gravity in the map frame is `(0, 0, −gravity_magnitude)`. Observations
//! and covisibility refer to keyframes by `index`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ba::InitGraph;
use crate::error::{Error, Result};

pub const MAP_FORMAT_VERSION: u32 = 1;
pub const MAP_FRAME: &str = "world-z-down-gravity-aligned";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Units {
    pub length: String,
    pub time: String,
    pub angle: String,
}

impl Default for Units {
    fn default() -> Self {
        Units {
            length: "m".into(),
            time: "s".into(),
            angle: "rad".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapHeader {
    pub version: u32,
    pub gravity_magnitude: f64,
    pub frame: String,
    pub units: Units,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapKeyframe {
    pub index: usize,
    pub frame: usize,
    pub timestamp: f64,
    pub world_from_body: [f64; 16],
    pub velocity: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapBias {
    pub gyro: [f64; 3],
    pub accel: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapObservation {
    pub keyframe: usize,
    pub u: f64,
    pub v: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapPointEntry {
    pub id: u64,
    pub position: [f64; 3],
    pub observations: Vec<MapObservation>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovisibilityEdge {
    pub a: usize,
    pub b: usize,
    pub weight: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialMap {
    pub header: MapHeader,
    pub keyframes: Vec<MapKeyframe>,
    pub bias: MapBias,
    pub points: Vec<MapPointEntry>,
    /// Pairs with `a < b` and a positive weight, sorted.
    pub covisibility: Vec<CovisibilityEdge>,
}

impl InitialMap {
    /// Number of points seen by both keyframes; symmetric.
    pub fn covisibility_weight(&self, a: usize, b: usize) -> usize {
        let (a, b) = (a.min(b), a.max(b));
        self.covisibility
            .iter()
            .find(|e| e.a == a && e.b == b)
            .map_or(0, |e| e.weight)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<InitialMap> {
        let map: InitialMap =
            serde_json::from_str(text).map_err(|e| Error::Data(format!("initial map: {e}")))?;
        if map.header.version != MAP_FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported initial map version {}",
                map.header.version
            )));
        }
        Ok(map)
    }
}

/// Weighted keyframe adjacency from per-point observation lists.
pub fn covisibility(points: &[MapPointEntry]) -> Vec<CovisibilityEdge> {
    let mut weights: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for p in points {
        let seen: Vec<usize> = p
            .observations
            .iter()
            .map(|o| o.keyframe)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        for (i, &a) in seen.iter().enumerate() {
            for &b in &seen[i + 1..] {
                *weights.entry((a, b)).or_default() += 1;
            }
        }
    }
    weights
        .into_iter()
        .map(|((a, b), weight)| CovisibilityEdge { a, b, weight })
        .collect()
}

/// Promotes the refined keyframes and points of `graph` to an initial map.
pub fn build_initial_map(graph: &InitGraph) -> Result<InitialMap> {
    let mut observations: Vec<Vec<MapObservation>> = vec![Vec::new(); graph.points.len()];
    for e in graph.reprojection_edges() {
        observations[e.point].push(MapObservation {
            keyframe: e.keyframe,
            u: e.pixel.x,
            v: e.pixel.y,
        });
    }
    let mut points = Vec::with_capacity(graph.points.len());
    for (p, mut obs) in graph.points.iter().zip(observations) {
        obs.sort_by_key(|o| o.keyframe);
        let distinct: BTreeSet<usize> = obs.iter().map(|o| o.keyframe).collect();
        if distinct.len() < 2 {
            return Err(Error::Data(format!(
                "map point {} is observed by {} keyframe(s)",
                p.id,
                distinct.len()
            )));
        }
        points.push(MapPointEntry {
            id: p.id,
            position: p.position.into(),
            observations: obs,
        });
    }
    let keyframes = graph
        .keyframes
        .iter()
        .enumerate()
        .map(|(k, kf)| MapKeyframe {
            index: k,
            frame: graph.keyframe_frames[k],
            timestamp: graph.keyframe_times[k],
            world_from_body: kf.pose().to_row_major(),
            velocity: kf.velocity.into(),
        })
        .collect();
    Ok(InitialMap {
        header: MapHeader {
            version: MAP_FORMAT_VERSION,
            gravity_magnitude: -graph.gravity.z,
            frame: MAP_FRAME.into(),
            units: Units::default(),
        },
        keyframes,
        bias: MapBias {
            gyro: graph.bias.gyro.into(),
            accel: graph.bias.accel.into(),
        },
        covisibility: covisibility(&points),
        points,
    })
}

pub fn serialize_map(map: &InitialMap, path: &Path) -> Result<()> {
    std::fs::write(path, map.to_json()?).map_err(|e| Error::io(path, e))
}

pub fn deserialize_map(path: &Path) -> Result<InitialMap> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    InitialMap::from_json(&text)
}
