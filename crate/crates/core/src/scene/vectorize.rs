//! Conversion of world-frame scenes into polyline arrays.
//!
//! Two layouts are produced. [`vectorize_focal`] expresses everything in one
//! focal agent's frame. [`to_polyline_frames`] expresses every polyline in its
//! own frame and keeps token poses in the world frame.

use serde::{Deserialize, Serialize};

use super::transform::distance_key;
use super::types::{road_type, AgentState, MapPoint, MapPolyline, Pose, Scene};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VectorizeConfig {
    pub max_map_polylines: usize,
    pub points_per_polyline: usize,
    pub categories: Vec<String>,
}

impl Default for VectorizeConfig {
    fn default() -> Self {
        Self {
            max_map_polylines: 64,
            points_per_polyline: 20,
            categories: vec!["vehicle".into(), "pedestrian".into(), "cyclist".into()],
        }
    }
}

impl VectorizeConfig {
    pub fn agent_channels(&self) -> usize {
        7 + self.categories.len()
    }

    pub fn map_channels(&self) -> usize {
        2 + road_type::COUNT
    }

    pub fn category_index(&self, category: &str) -> Result<usize> {
        self.categories
            .iter()
            .position(|c| c == category)
            .ok_or_else(|| Error::invalid(format!("unknown agent category `{category}`")))
    }
}

/// `features` is `[count, points, channels]`; `mask` flags valid points.
#[derive(Clone, Debug, PartialEq)]
pub struct PolylineBatch {
    pub features: Tensor,
    pub mask: Vec<bool>,
}

impl PolylineBatch {
    pub fn count(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn points(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[2]
    }
}

#[derive(Clone, Debug)]
pub struct VectorizedScene {
    pub agents: PolylineBatch,
    pub map: PolylineBatch,
    pub agent_ids: Vec<u64>,
    pub agent_categories: Vec<usize>,
    /// Latest agent poses, in the focal frame for the focal layout and in the
    /// world frame otherwise.
    pub agent_poses: Vec<Pose>,
    /// Map polyline centers and tangents, framed like `agent_poses`.
    pub map_poses: Vec<Pose>,
    pub map_degenerate: Vec<bool>,
    /// World pose of the focal frame, `None` for the per-polyline layout.
    pub frame: Option<Pose>,
}

impl VectorizedScene {
    pub fn num_tokens(&self) -> usize {
        self.agent_poses.len() + self.map_poses.len()
    }

    pub fn token_poses(&self) -> Vec<Pose> {
        self.agent_poses.iter().chain(&self.map_poses).copied().collect()
    }

    pub fn agent_row(&self, id: u64) -> Result<usize> {
        self.agent_ids
            .iter()
            .position(|&a| a == id)
            .ok_or_else(|| Error::invalid(format!("agent {id} has no valid history")))
    }
}

/// Splits polylines into chunks of at most `n` points. Consecutive chunks
/// share their boundary point so every chunk keeps at least two points.
pub fn chunk_map(map: &[MapPolyline], n: usize) -> Vec<MapPolyline> {
    let n = n.max(2);
    let mut out = Vec::new();
    for pl in map {
        if pl.points.len() <= n {
            out.push(pl.clone());
            continue;
        }
        let mut start = 0;
        while start + 1 < pl.points.len() {
            let end = (start + n).min(pl.points.len());
            out.push(MapPolyline {
                points: pl.points[start..end].to_vec(),
            });
            start = end - 1;
        }
    }
    out
}

/// Indices of the `max` polylines whose centers are nearest to any anchor,
/// returned in their original order.
pub fn select_map(map: &[MapPolyline], anchors: &[[f64; 2]], max: usize) -> Vec<usize> {
    if map.len() <= max {
        return (0..map.len()).collect();
    }
    let mut keys: Vec<(i64, usize)> = map
        .iter()
        .enumerate()
        .map(|(j, pl)| {
            let c = pl.center();
            let d = anchors.iter().map(|&a| distance_key(a, c)).min().unwrap_or(0);
            (d, j)
        })
        .collect();
    keys.sort_unstable();
    let mut picked: Vec<usize> = keys[..max].iter().map(|&(_, j)| j).collect();
    picked.sort_unstable();
    picked
}

fn agent_features(
    states: &[AgentState],
    frame: &Pose,
    category: usize,
    channels: usize,
    out: &mut Vec<f64>,
    mask: &mut Vec<bool>,
) {
    for s in states {
        let start = out.len();
        out.resize(start + channels, 0.0);
        mask.push(s.valid);
        if !s.valid {
            continue;
        }
        let p = frame.to_local([s.x, s.y]);
        let v = frame.vec_to_local([s.vx, s.vy]);
        let (sn, cs) = (s.heading - frame.heading).sin_cos();
        let row = &mut out[start..];
        row[..7].copy_from_slice(&[p[0], p[1], cs, sn, v[0], v[1], 1.0]);
        row[7 + category] = 1.0;
    }
}

fn map_features(points: &[MapPoint], frame: &Pose, n: usize, out: &mut Vec<f64>, mask: &mut Vec<bool>) {
    let channels = 2 + road_type::COUNT;
    for i in 0..n {
        let start = out.len();
        out.resize(start + channels, 0.0);
        let Some(p) = points.get(i) else {
            mask.push(false);
            continue;
        };
        mask.push(true);
        let q = frame.to_local([p.x, p.y]);
        out[start] = q[0];
        out[start + 1] = q[1];
        out[start + 2 + (p.road_type as usize).min(road_type::COUNT - 1)] = 1.0;
    }
}

struct Prepared<'a> {
    agent_rows: Vec<usize>,
    agent_poses: Vec<Pose>,
    categories: Vec<usize>,
    map: Vec<MapPolyline>,
    scene: &'a Scene,
}

fn prepare<'a>(scene: &'a Scene, anchors: &[[f64; 2]], cfg: &VectorizeConfig) -> Result<Prepared<'a>> {
    let mut agent_rows = Vec::new();
    let mut agent_poses = Vec::new();
    let mut categories = Vec::new();
    for (i, a) in scene.agents.iter().enumerate() {
        if let Some(p) = a.current_pose() {
            agent_rows.push(i);
            agent_poses.push(p);
            categories.push(cfg.category_index(&a.category)?);
        }
    }
    let chunks = chunk_map(&scene.map, cfg.points_per_polyline);
    let picked = select_map(&chunks, anchors, cfg.max_map_polylines);
    let map = picked.into_iter().map(|j| chunks[j].clone()).collect();
    Ok(Prepared {
        agent_rows,
        agent_poses,
        categories,
        map,
        scene,
    })
}

fn build(p: Prepared<'_>, cfg: &VectorizeConfig, focal: Option<Pose>) -> Result<VectorizedScene> {
    let th = p.scene.history_len();
    let ca = cfg.agent_channels();
    let n = cfg.points_per_polyline;
    let mut af = Vec::with_capacity(p.agent_rows.len() * th * ca);
    let mut am = Vec::with_capacity(p.agent_rows.len() * th);
    for (k, &row) in p.agent_rows.iter().enumerate() {
        let frame = focal.unwrap_or(p.agent_poses[k]);
        agent_features(&p.scene.agents[row].history, &frame, p.categories[k], ca, &mut af, &mut am);
    }
    let mut mf = Vec::with_capacity(p.map.len() * n * cfg.map_channels());
    let mut mm = Vec::with_capacity(p.map.len() * n);
    let mut map_poses = Vec::with_capacity(p.map.len());
    let mut degenerate = Vec::with_capacity(p.map.len());
    for pl in &p.map {
        let pose = pl.pose();
        let frame = focal.unwrap_or(pose);
        map_features(&pl.points, &frame, n, &mut mf, &mut mm);
        map_poses.push(match focal {
            Some(f) => pose.in_frame(&f),
            None => pose,
        });
        degenerate.push(pl.is_degenerate());
    }
    let agent_poses = match focal {
        Some(f) => p.agent_poses.iter().map(|q| q.in_frame(&f)).collect(),
        None => p.agent_poses,
    };
    Ok(VectorizedScene {
        agents: PolylineBatch {
            features: Tensor::new(vec![p.agent_rows.len(), th, ca], af)?,
            mask: am,
        },
        map: PolylineBatch {
            features: Tensor::new(vec![p.map.len(), n, cfg.map_channels()], mf)?,
            mask: mm,
        },
        agent_ids: p.agent_rows.iter().map(|&r| p.scene.agents[r].id).collect(),
        agent_categories: p.categories,
        agent_poses,
        map_poses,
        map_degenerate: degenerate,
        frame: focal,
    })
}

/// Everything expressed in the frame of `focal_id` at its latest valid state.
pub fn vectorize_focal(scene: &Scene, focal_id: u64, cfg: &VectorizeConfig) -> Result<VectorizedScene> {
    let frame = scene
        .agent(focal_id)?
        .current_pose()
        .ok_or_else(|| Error::invalid(format!("focal agent {focal_id} has no valid state")))?;
    let p = prepare(scene, &[frame.position], cfg)?;
    build(p, cfg, Some(frame))
}

/// Every polyline in its own frame; map polylines are selected around all
/// focal agents.
pub fn to_polyline_frames(scene: &Scene, cfg: &VectorizeConfig) -> Result<VectorizedScene> {
    let anchors = scene
        .focal_ids
        .iter()
        .map(|&id| {
            scene
                .agent(id)?
                .current_pose()
                .map(|p| p.position)
                .ok_or_else(|| Error::invalid(format!("focal agent {id} has no valid state")))
        })
        .collect::<Result<Vec<_>>>()?;
    let p = prepare(scene, &anchors, cfg)?;
    build(p, cfg, None)
}

/// Future `(x, y, vx, vy)` of the listed agents, each in its own frame, as
/// `[agents, T_f, 4]` plus a per-frame validity mask.
pub fn future_targets(scene: &Scene, agent_ids: &[u64], frames: &[Pose]) -> Result<(Tensor, Vec<bool>)> {
    let tf = scene.future_len();
    let mut data = Vec::with_capacity(agent_ids.len() * tf * 4);
    let mut mask = Vec::with_capacity(agent_ids.len() * tf);
    for (&id, frame) in agent_ids.iter().zip(frames) {
        for s in &scene.agent(id)?.future {
            mask.push(s.valid);
            if s.valid {
                let p = frame.to_local([s.x, s.y]);
                let v = frame.vec_to_local([s.vx, s.vy]);
                data.extend_from_slice(&[p[0], p[1], v[0], v[1]]);
            } else {
                data.extend_from_slice(&[0.0; 4]);
            }
        }
    }
    Ok((Tensor::new(vec![agent_ids.len(), tf, 4], data)?, mask))
}
