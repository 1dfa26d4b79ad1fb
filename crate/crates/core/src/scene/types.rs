//! World-frame scene records.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub vx: f64,
    pub vy: f64,
    pub valid: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FutureState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub valid: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub id: u64,
    pub category: String,
    pub history: Vec<AgentState>,
    pub future: Vec<FutureState>,
}

impl AgentTrack {
    /// The most recent valid history frame.
    pub fn latest(&self) -> Option<&AgentState> {
        self.history.iter().rev().find(|s| s.valid)
    }

    /// Latest valid position and heading; the heading is the recorded one
    /// even when the agent is stationary.
    pub fn current_pose(&self) -> Option<Pose> {
        self.latest().map(|s| Pose::new([s.x, s.y], s.heading))
    }

    /// Last valid future frame, if any.
    pub fn final_future(&self) -> Option<&FutureState> {
        self.future.last().filter(|s| s.valid)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapPoint {
    pub x: f64,
    pub y: f64,
    pub road_type: u8,
}

/// Road-type codes used in map point features.
pub mod road_type {
    pub const LANE: u8 = 0;
    pub const CONNECTOR: u8 = 1;
    pub const EDGE: u8 = 2;
    pub const STOP_LINE: u8 = 3;
    pub const COUNT: usize = 4;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapPolyline {
    pub points: Vec<MapPoint>,
}

impl MapPolyline {
    pub fn center(&self) -> [f64; 2] {
        let n = self.points.len().max(1) as f64;
        let (sx, sy) = self.points.iter().fold((0.0, 0.0), |(a, b), p| (a + p.x, b + p.y));
        [sx / n, sy / n]
    }

    /// True when the first and last point coincide, leaving no direction.
    pub fn is_degenerate(&self) -> bool {
        match (self.points.first(), self.points.last()) {
            (Some(a), Some(b)) => a.x == b.x && a.y == b.y,
            _ => true,
        }
    }

    /// Direction from the first to the last point, 0 for a degenerate polyline.
    pub fn tangent_heading(&self) -> f64 {
        if self.is_degenerate() {
            return 0.0;
        }
        let a = self.points[0];
        let b = self.points[self.points.len() - 1];
        wrap_angle((b.y - a.y).atan2(b.x - a.x))
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.center(), self.tangent_heading())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: [f64; 2],
    pub heading: f64,
}

impl Pose {
    pub fn new(position: [f64; 2], heading: f64) -> Self {
        Self {
            position,
            heading: wrap_angle(heading),
        }
    }

    pub fn identity() -> Self {
        Self::new([0.0, 0.0], 0.0)
    }

    /// Expresses a world point in this pose's frame.
    pub fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        let dx = p[0] - self.position[0];
        let dy = p[1] - self.position[1];
        [c * dx + s * dy, -s * dx + c * dy]
    }

    /// Rotates a world vector into this pose's frame.
    pub fn vec_to_local(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [c * v[0] + s * v[1], -s * v[0] + c * v[1]]
    }

    /// Maps a point given in this pose's frame back to the world.
    pub fn to_world(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [
            c * p[0] - s * p[1] + self.position[0],
            s * p[0] + c * p[1] + self.position[1],
        ]
    }

    pub fn vec_to_world(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [c * v[0] - s * v[1], s * v[0] + c * v[1]]
    }

    /// This pose expressed in `frame`.
    pub fn in_frame(&self, frame: &Pose) -> Pose {
        Pose::new(frame.to_local(self.position), self.heading - frame.heading)
    }
}

/// Ground-truth generator annotations kept alongside a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub seed: u64,
    pub topology: String,
    pub focal_intents: Vec<FocalIntent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalIntent {
    pub agent_id: u64,
    pub intent: String,
    /// Noise-free world-frame endpoints the agent would reach under each
    /// plausible intent, given its observed history.
    pub alternatives: Vec<IntentEndpoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentEndpoint {
    pub intent: String,
    pub endpoint: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub agents: Vec<AgentTrack>,
    pub map: Vec<MapPolyline>,
    pub focal_ids: Vec<u64>,
    pub frame_period: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<SceneMeta>,
}

impl Scene {
    pub fn agent(&self, id: u64) -> Result<&AgentTrack> {
        self.agents
            .iter()
            .find(|a| a.id == id)
            .ok_or_else(|| Error::invalid(format!("scene {}: unknown agent id {id}", self.id)))
    }

    pub fn agent_index(&self, id: u64) -> Result<usize> {
        self.agents
            .iter()
            .position(|a| a.id == id)
            .ok_or_else(|| Error::invalid(format!("scene {}: unknown agent id {id}", self.id)))
    }

    pub fn history_len(&self) -> usize {
        self.agents.first().map_or(0, |a| a.history.len())
    }

    pub fn future_len(&self) -> usize {
        self.agents.first().map_or(0, |a| a.future.len())
    }

    /// Checks structural invariants.
    pub fn validate(&self) -> Result<()> {
        let id = &self.id;
        if self.agents.is_empty() {
            return Err(Error::invalid(format!("scene {id}: no agents")));
        }
        if self.focal_ids.is_empty() {
            return Err(Error::invalid(format!("scene {id}: no focal agents")));
        }
        if !(self.frame_period > 0.0) {
            return Err(Error::invalid(format!("scene {id}: frame period must be positive")));
        }
        let (th, tf) = (self.history_len(), self.future_len());
        let mut seen = std::collections::BTreeSet::new();
        for a in &self.agents {
            if !seen.insert(a.id) {
                return Err(Error::invalid(format!("scene {id}: duplicate agent id {}", a.id)));
            }
            if a.history.len() != th || a.future.len() != tf {
                return Err(Error::invalid(format!("scene {id}: agent {} has ragged frames", a.id)));
            }
            for s in &a.history {
                let finite = [s.x, s.y, s.heading, s.vx, s.vy].iter().all(|v| v.is_finite());
                if !finite || s.heading <= -PI || s.heading > PI {
                    return Err(Error::invalid(format!("scene {id}: agent {} has an invalid state", a.id)));
                }
            }
        }
        for &f in &self.focal_ids {
            let a = self.agent(f)?;
            if !a.history.last().is_some_and(|s| s.valid) {
                return Err(Error::invalid(format!("scene {id}: focal agent {f} has no current state")));
            }
        }
        for (i, p) in self.map.iter().enumerate() {
            if p.points.len() < 2 {
                return Err(Error::invalid(format!("scene {id}: map polyline {i} has fewer than 2 points")));
            }
        }
        Ok(())
    }
}
