//! Synthetic intersection scenarios with latent driver intents.
//!
//! Roads are built in a canonical frame where approach 0 enters from the
//! south heading north; the other approaches are the same geometry rotated by
//! multiples of 90°. Travel directions are indexed counter-clockwise
//! (0 north, 1 west, 2 south, 3 east), so a left turn from direction `a`
//! leaves in direction `a + 1` and a right turn in `a + 3`. Vehicles keep to
//! the right-hand lane.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::transform::transform_scene;
use super::types::{
    road_type, wrap_angle, AgentState, AgentTrack, FocalIntent, FutureState, IntentEndpoint, MapPoint, MapPolyline,
    Pose, Scene, SceneMeta,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Straight,
    TIntersection,
    FourWay,
}

impl Topology {
    pub fn name(self) -> &'static str {
        match self {
            Topology::Straight => "straight",
            Topology::TIntersection => "t_intersection",
            Topology::FourWay => "four_way",
        }
    }

    fn approaches(self) -> &'static [usize] {
        match self {
            Topology::Straight => &[1, 3],
            Topology::TIntersection => &[0, 1, 3],
            Topology::FourWay => &[0, 1, 2, 3],
        }
    }

    fn exits(self) -> &'static [usize] {
        match self {
            Topology::Straight => &[1, 3],
            Topology::TIntersection => &[1, 2, 3],
            Topology::FourWay => &[0, 1, 2, 3],
        }
    }

    fn has_junction(self) -> bool {
        self != Topology::Straight
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intent {
    Left,
    Straight,
    Right,
    Stop,
}

impl Intent {
    pub const ALL: [Intent; 4] = [Intent::Left, Intent::Straight, Intent::Right, Intent::Stop];

    pub fn name(self) -> &'static str {
        match self {
            Intent::Left => "left",
            Intent::Straight => "straight",
            Intent::Right => "right",
            Intent::Stop => "stop",
        }
    }

    /// Exit travel direction for approach direction `a`; `None` for stop.
    fn exit(self, a: usize) -> Option<usize> {
        match self {
            Intent::Left => Some((a + 1) % 4),
            Intent::Straight => Some(a),
            Intent::Right => Some((a + 3) % 4),
            Intent::Stop => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub topology: Topology,
    pub num_agents: usize,
    pub num_focal: usize,
    pub history_frames: usize,
    pub future_frames: usize,
    pub frame_period: f64,
    /// Probabilities of left, straight, right and stop.
    pub intent_probs: [f64; 4],
    pub speed_range: [f64; 2],
    pub max_accel: f64,
    pub position_noise: f64,
    pub heading_noise: f64,
    pub lateral_offset_noise: f64,
    pub lane_width: f64,
    pub junction_half_size: f64,
    pub road_length: f64,
    pub point_spacing: f64,
    pub follow_probability: f64,
    pub follow_intent_copy: f64,
    pub follow_gap: [f64; 2],
    pub max_start_offset: f64,
    pub partial_history_probability: f64,
    pub randomize_world_frame: bool,
    pub category: String,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            topology: Topology::FourWay,
            num_agents: 4,
            num_focal: 1,
            history_frames: 11,
            future_frames: 20,
            frame_period: 0.1,
            intent_probs: [0.3, 0.3, 0.3, 0.1],
            speed_range: [6.0, 9.0],
            max_accel: 0.3,
            position_noise: 0.03,
            heading_noise: 0.01,
            lateral_offset_noise: 0.15,
            lane_width: 3.5,
            junction_half_size: 7.0,
            road_length: 36.0,
            point_spacing: 2.0,
            follow_probability: 0.3,
            follow_intent_copy: 0.8,
            follow_gap: [10.0, 14.0],
            max_start_offset: 4.0,
            partial_history_probability: 0.2,
            randomize_world_frame: true,
            category: "vehicle".into(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut errs = Vec::new();
        if self.num_agents == 0 {
            errs.push("num_agents must be at least 1".to_string());
        }
        if self.num_focal == 0 || self.num_focal > self.num_agents {
            errs.push(format!("num_focal must be in 1..={}", self.num_agents));
        }
        if self.history_frames == 0 || self.future_frames == 0 {
            errs.push("history_frames and future_frames must be positive".to_string());
        }
        if !(self.frame_period > 0.0) {
            errs.push("frame_period must be positive".to_string());
        }
        if self.intent_probs.iter().any(|p| !(*p >= 0.0)) || self.intent_probs.iter().sum::<f64>() <= 0.0 {
            errs.push("intent_probs must be nonnegative with a positive sum".to_string());
        }
        if !(self.speed_range[0] > 0.0 && self.speed_range[0] <= self.speed_range[1]) {
            errs.push("speed_range must be positive and ordered".to_string());
        }
        if !(self.follow_gap[0] > 0.0 && self.follow_gap[0] <= self.follow_gap[1]) {
            errs.push("follow_gap must be positive and ordered".to_string());
        }
        for (name, v) in [
            ("max_accel", self.max_accel),
            ("position_noise", self.position_noise),
            ("heading_noise", self.heading_noise),
            ("lateral_offset_noise", self.lateral_offset_noise),
            ("max_start_offset", self.max_start_offset),
        ] {
            if !(v >= 0.0) {
                errs.push(format!("{name} must be nonnegative"));
            }
        }
        for (name, v) in [
            ("follow_probability", self.follow_probability),
            ("follow_intent_copy", self.follow_intent_copy),
            ("partial_history_probability", self.partial_history_probability),
        ] {
            if !(0.0..=1.0).contains(&v) {
                errs.push(format!("{name} must be in [0, 1]"));
            }
        }
        if !(self.lane_width > 0.0 && self.junction_half_size > self.lane_width && self.road_length > 0.0) {
            errs.push("road geometry must satisfy 0 < lane_width < junction_half_size and road_length > 0".to_string());
        }
        if !(self.point_spacing > 0.0) {
            errs.push("point_spacing must be positive".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Segment {
    Line { start: [f64; 2], heading: f64, length: f64 },
    /// `turn` is +1 for counter-clockwise, −1 for clockwise.
    Arc { center: [f64; 2], radius: f64, start_angle: f64, sweep: f64, turn: f64 },
}

impl Segment {
    fn length(&self) -> f64 {
        match *self {
            Segment::Line { length, .. } => length,
            Segment::Arc { radius, sweep, .. } => radius * sweep,
        }
    }

    fn pose_at(&self, s: f64) -> ([f64; 2], f64) {
        match *self {
            Segment::Line { start, heading, .. } => {
                let (sn, c) = heading.sin_cos();
                ([start[0] + c * s, start[1] + sn * s], heading)
            }
            Segment::Arc { center, radius, start_angle, turn, .. } => {
                let ang = start_angle + turn * s / radius;
                let (sn, c) = ang.sin_cos();
                ([center[0] + radius * c, center[1] + radius * sn], ang + turn * FRAC_PI_2)
            }
        }
    }

    fn rotated(&self, quarter_turns: usize) -> Segment {
        let r = quarter_turns as f64 * FRAC_PI_2;
        let rot = |p: [f64; 2]| {
            let (s, c) = r.sin_cos();
            [c * p[0] - s * p[1], s * p[0] + c * p[1]]
        };
        match *self {
            Segment::Line { start, heading, length } => Segment::Line {
                start: rot(start),
                heading: heading + r,
                length,
            },
            Segment::Arc { center, radius, start_angle, sweep, turn } => Segment::Arc {
                center: rot(center),
                radius,
                start_angle: start_angle + r,
                sweep,
                turn,
            },
        }
    }
}

/// A chain of segments parameterized by arc length; extrapolates linearly
/// beyond both ends.
#[derive(Clone, Debug)]
struct Path {
    segments: Vec<Segment>,
}

impl Path {
    fn length(&self) -> f64 {
        self.segments.iter().map(Segment::length).sum()
    }

    fn pose_at(&self, s: f64) -> ([f64; 2], f64) {
        if s < 0.0 {
            let (p, h) = self.segments[0].pose_at(0.0);
            return ([p[0] + h.cos() * s, p[1] + h.sin() * s], h);
        }
        let mut rest = s;
        for seg in &self.segments {
            if rest <= seg.length() {
                return seg.pose_at(rest);
            }
            rest -= seg.length();
        }
        let last = self.segments[self.segments.len() - 1];
        let (p, h) = last.pose_at(last.length());
        ([p[0] + h.cos() * rest, p[1] + h.sin() * rest], h)
    }

    fn sample(&self, spacing: f64, road_type: u8) -> MapPolyline {
        let len = self.length();
        let steps = (len / spacing).ceil().max(1.0) as usize;
        let points = (0..=steps)
            .map(|i| {
                let (p, _) = self.pose_at(len * i as f64 / steps as f64);
                MapPoint { x: p[0], y: p[1], road_type }
            })
            .collect();
        MapPolyline { points }
    }
}

struct Geometry {
    h: f64,
    b: f64,
    len: f64,
}

impl Geometry {
    fn new(cfg: &GeneratorConfig) -> Self {
        let junction = cfg.topology.has_junction();
        Self {
            h: cfg.lane_width / 2.0,
            b: if junction { cfg.junction_half_size } else { 0.0 },
            len: cfg.road_length,
        }
    }

    /// Incoming lane of approach `a`, ending at the stop line.
    fn incoming(&self, a: usize) -> Segment {
        Segment::Line {
            start: [self.h, -self.b - self.len],
            heading: FRAC_PI_2,
            length: self.len,
        }
        .rotated(a)
    }

    /// Outgoing lane for travel direction `d`, starting at the junction edge.
    fn outgoing(&self, d: usize) -> Segment {
        Segment::Line {
            start: [self.h, self.b],
            heading: FRAC_PI_2,
            length: self.len,
        }
        .rotated(d)
    }

    fn connector(&self, a: usize, intent: Intent) -> Option<Segment> {
        let (h, b) = (self.h, self.b);
        let seg = match intent {
            Intent::Straight => Segment::Line {
                start: [h, -b],
                heading: FRAC_PI_2,
                length: 2.0 * b,
            },
            Intent::Right => Segment::Arc {
                center: [b, -b],
                radius: b - h,
                start_angle: PI,
                sweep: FRAC_PI_2,
                turn: -1.0,
            },
            Intent::Left => Segment::Arc {
                center: [-b, -b],
                radius: b + h,
                start_angle: 0.0,
                sweep: FRAC_PI_2,
                turn: 1.0,
            },
            Intent::Stop => return None,
        };
        Some(seg.rotated(a))
    }

    fn route(&self, a: usize, intent: Intent) -> Path {
        let mut segments = vec![self.incoming(a)];
        // A stopping vehicle keeps the straight route as its nominal path.
        let through = if intent == Intent::Stop { Intent::Straight } else { intent };
        if self.b > 0.0 {
            segments.extend(self.connector(a, through));
        }
        segments.push(self.outgoing(through.exit(a).expect("moving intent")));
        Path { segments }
    }

    fn stop_line(&self, a: usize) -> Segment {
        Segment::Line {
            start: [0.0, -self.b],
            heading: 0.0,
            length: 2.0 * self.h,
        }
        .rotated(a)
    }

    fn edges(&self, a: usize) -> [Segment; 2] {
        let w = 2.0 * self.h;
        [
            Segment::Line {
                start: [w, -self.b - self.len],
                heading: FRAC_PI_2,
                length: self.len,
            }
            .rotated(a),
            Segment::Line {
                start: [-w, -self.b - self.len],
                heading: FRAC_PI_2,
                length: self.len,
            }
            .rotated(a),
        ]
    }
}

fn available(topology: Topology, a: usize, intent: Intent) -> bool {
    match intent.exit(a) {
        None => true,
        Some(d) => topology.exits().contains(&d),
    }
}

fn build_map(cfg: &GeneratorConfig, geo: &Geometry) -> Vec<MapPolyline> {
    let sp = cfg.point_spacing;
    let topo = cfg.topology;
    let mut map = Vec::new();
    for &a in topo.approaches() {
        map.push(Path { segments: vec![geo.incoming(a)] }.sample(sp, road_type::LANE));
    }
    for &d in topo.exits() {
        map.push(Path { segments: vec![geo.outgoing(d)] }.sample(sp, road_type::LANE));
    }
    if topo.has_junction() {
        for &a in topo.approaches() {
            for intent in [Intent::Left, Intent::Straight, Intent::Right] {
                if available(topo, a, intent) {
                    let c = geo.connector(a, intent).expect("moving intent");
                    map.push(Path { segments: vec![c] }.sample(sp, road_type::CONNECTOR));
                }
            }
            map.push(Path { segments: vec![geo.stop_line(a)] }.sample(sp, road_type::STOP_LINE));
        }
        let arms: Vec<usize> = (0..4)
            .filter(|&d| topo.approaches().contains(&d) || topo.exits().contains(&((d + 2) % 4)))
            .collect();
        for a in arms {
            for e in geo.edges(a) {
                map.push(Path { segments: vec![e] }.sample(sp, road_type::EDGE));
            }
        }
    } else {
        for e in geo.edges(1) {
            map.push(Path { segments: vec![e] }.sample(sp, road_type::EDGE));
        }
    }
    map
}

/// Longitudinal motion of one vehicle relative to its stop line.
#[derive(Clone, Copy, Debug)]
struct Motion {
    /// Arc length at the current (last history) frame.
    s0: f64,
    speed: f64,
    accel: f64,
    /// For stopping vehicles: time (≤ 0) at which the vehicle came to rest and
    /// the deceleration before that.
    stop: Option<(f64, f64)>,
}

impl Motion {
    /// Arc length and speed at time `t` relative to the current frame.
    fn at(&self, t: f64) -> (f64, f64) {
        if let Some((ts, decel)) = self.stop {
            if t >= ts {
                return (self.s0, 0.0);
            }
            let dt = ts - t;
            return (self.s0 - 0.5 * decel * dt * dt, decel * dt);
        }
        // Speed is floored at 0.5 m/s; integrate piecewise.
        let floor = 0.5;
        let v = self.speed + self.accel * t;
        if v >= floor {
            return (self.s0 + self.speed * t + 0.5 * self.accel * t * t, v);
        }
        let tc = (floor - self.speed) / self.accel;
        let sc = self.s0 + self.speed * tc + 0.5 * self.accel * tc * tc;
        (sc + floor * (t - tc), floor)
    }
}

struct Vehicle {
    approach: usize,
    intent: Intent,
    motion: Motion,
    lateral: f64,
    /// Distance before the stop line at the current frame.
    gap_to_stop: f64,
}

fn pick_intent(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig, a: usize) -> Intent {
    let weights: Vec<f64> = Intent::ALL
        .iter()
        .zip(cfg.intent_probs)
        .map(|(&i, p)| if available(cfg.topology, a, i) { p } else { 0.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Intent::Straight;
    }
    let mut u = rng.random::<f64>() * total;
    for (i, w) in Intent::ALL.iter().zip(&weights) {
        if u < *w {
            return *i;
        }
        u -= w;
    }
    *Intent::ALL
        .iter()
        .zip(&weights)
        .rev()
        .find(|(_, w)| **w > 0.0)
        .map(|(i, _)| i)
        .expect("positive total")
}

fn offset_pose(p: [f64; 2], h: f64, lateral: f64) -> [f64; 2] {
    // Positive lateral offset is to the left of the travel direction.
    [p[0] - h.sin() * lateral, p[1] + h.cos() * lateral]
}

/// Generates one scene. Output depends only on `cfg` and `seed`.
pub fn generate_synthetic_scene(cfg: &GeneratorConfig, seed: u64) -> Result<Scene> {
    cfg.validate().map_err(|e| Error::Config(e.join("; ")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geo = Geometry::new(cfg);
    let topo = cfg.topology;
    let stop_s = geo.len;
    let dt = cfg.frame_period;
    let pos_noise = Normal::new(0.0, cfg.position_noise.max(1e-300)).expect("valid sigma");
    let head_noise = Normal::new(0.0, cfg.heading_noise.max(1e-300)).expect("valid sigma");
    let lat_noise = Normal::new(0.0, cfg.lateral_offset_noise.max(1e-300)).expect("valid sigma");

    let mut vehicles: Vec<Vehicle> = Vec::with_capacity(cfg.num_agents);
    for i in 0..cfg.num_agents {
        let leader = if i > 0 && rng.random::<f64>() < cfg.follow_probability {
            Some(rng.random_range(0..i))
        } else {
            None
        };
        let approach = match leader {
            Some(l) => vehicles[l].approach,
            None => topo.approaches()[rng.random_range(0..topo.approaches().len())],
        };
        let mut intent = pick_intent(&mut rng, cfg, approach);
        if let Some(l) = leader {
            if rng.random::<f64>() < cfg.follow_intent_copy {
                intent = vehicles[l].intent;
            }
        }
        let queue_tail = vehicles
            .iter()
            .filter(|v| v.approach == approach)
            .map(|v| v.gap_to_stop)
            .fold(None, |m: Option<f64>, g| Some(m.map_or(g, |m| m.max(g))));
        let gap_to_stop = match queue_tail {
            Some(t) => t + rng.random_range(cfg.follow_gap[0]..=cfg.follow_gap[1]),
            None => rng.random_range(0.0..=cfg.max_start_offset),
        };
        let speed = rng.random_range(cfg.speed_range[0]..=cfg.speed_range[1]);
        let accel = if cfg.max_accel > 0.0 {
            rng.random_range(-cfg.max_accel..=cfg.max_accel)
        } else {
            0.0
        };
        let stop = (intent == Intent::Stop).then(|| {
            let ts = -rng.random_range(0.0..=0.4);
            let decel = rng.random_range(2.0..=5.0);
            (ts, decel)
        });
        let lateral = if cfg.lateral_offset_noise > 0.0 { lat_noise.sample(&mut rng) } else { 0.0 };
        vehicles.push(Vehicle {
            approach,
            intent,
            motion: Motion {
                s0: stop_s - gap_to_stop,
                speed,
                accel,
                stop,
            },
            lateral,
            gap_to_stop,
        });
    }

    let th = cfg.history_frames;
    let tf = cfg.future_frames;
    let mut agents = Vec::with_capacity(vehicles.len());
    let mut focal_intents = Vec::new();
    for (i, v) in vehicles.iter().enumerate() {
        let path = geo.route(v.approach, v.intent);
        let is_focal = i < cfg.num_focal;
        let first_valid = if !is_focal && rng.random::<f64>() < cfg.partial_history_probability {
            rng.random_range(1..th.max(2))
        } else {
            0
        };
        let mut history = Vec::with_capacity(th);
        for f in 0..th {
            let t = -((th - 1 - f) as f64) * dt;
            if f < first_valid {
                history.push(AgentState::default());
                continue;
            }
            let (s, speed) = v.motion.at(t);
            let (p, h) = path.pose_at(s);
            let p = offset_pose(p, h, v.lateral);
            let mut x = p[0];
            let mut y = p[1];
            let mut heading = h;
            if cfg.position_noise > 0.0 {
                x += pos_noise.sample(&mut rng);
                y += pos_noise.sample(&mut rng);
            }
            if cfg.heading_noise > 0.0 {
                heading += head_noise.sample(&mut rng);
            }
            history.push(AgentState {
                x,
                y,
                heading: wrap_angle(heading),
                vx: speed * h.cos(),
                vy: speed * h.sin(),
                valid: true,
            });
        }
        let future: Vec<FutureState> = (1..=tf)
            .map(|f| {
                let (s, speed) = v.motion.at(f as f64 * dt);
                let (p, h) = path.pose_at(s);
                let p = offset_pose(p, h, v.lateral);
                FutureState {
                    x: p[0],
                    y: p[1],
                    vx: speed * h.cos(),
                    vy: speed * h.sin(),
                    valid: true,
                }
            })
            .collect();
        if is_focal {
            let horizon = tf as f64 * dt;
            let candidates: Vec<Intent> = if v.intent == Intent::Stop {
                vec![Intent::Stop]
            } else {
                Intent::ALL[..3]
                    .iter()
                    .copied()
                    .filter(|&k| available(topo, v.approach, k) && cfg.intent_probs[k as usize] > 0.0)
                    .collect()
            };
            let alternatives = candidates
                .into_iter()
                .map(|k| {
                    let (s, _) = v.motion.at(horizon);
                    let (p, h) = geo.route(v.approach, k).pose_at(s);
                    IntentEndpoint {
                        intent: k.name().to_string(),
                        endpoint: offset_pose(p, h, v.lateral),
                    }
                })
                .collect();
            focal_intents.push(FocalIntent {
                agent_id: i as u64,
                intent: v.intent.name().to_string(),
                alternatives,
            });
        }
        agents.push(AgentTrack {
            id: i as u64,
            category: cfg.category.clone(),
            history,
            future,
        });
    }

    let scene = Scene {
        id: format!("syn-{seed}"),
        agents,
        map: build_map(cfg, &geo),
        focal_ids: (0..cfg.num_focal as u64).collect(),
        frame_period: dt,
        meta: Some(SceneMeta {
            seed,
            topology: topo.name().to_string(),
            focal_intents,
        }),
    };
    let scene = if cfg.randomize_world_frame {
        let t = Pose::new(
            [rng.random_range(-200.0..200.0), rng.random_range(-200.0..200.0)],
            rng.random_range(-PI..PI),
        );
        transform_scene(&scene, &t)
    } else {
        scene
    };
    scene.validate()?;
    Ok(scene)
}

/// `count` scenes with seeds derived from `seed`.
pub fn generate_dataset(cfg: &GeneratorConfig, seed: u64, count: usize) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| generate_synthetic_scene(cfg, seed.wrapping_mul(1_000_003).wrapping_add(i as u64)))
        .collect()
}
