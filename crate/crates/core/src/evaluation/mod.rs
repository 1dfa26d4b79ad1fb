//! Trajectory selection, marginal and joint metrics, and the efficiency
//! benchmark.

mod bench;
mod joint;
mod metrics;
mod nms;

use serde::{Deserialize, Serialize};

pub use bench::{attention_memory_scaling, benchmark_efficiency, BenchConfig, BenchEntry, BenchReport, MemoryPoint, Timing};
pub use joint::{combine_joint, JointPrediction};
pub use metrics::{average_precision, compute_metrics, CategoryMetrics, CoverageReport, MetricsReport};
pub use nms::{confidence_order, nms_select};

use crate::error::{Error, Result};
use crate::model::{FocalPrediction, MotionModel};
use crate::numerics::ParameterStore;
use crate::scene::Scene;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Trajectories kept per agent after NMS.
    pub num_predictions: usize,
    pub nms_threshold: f64,
    /// Static final-step miss threshold, also used for intent coverage.
    pub miss_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            num_predictions: 6,
            nms_threshold: 2.5,
            miss_threshold: 2.0,
        }
    }
}

impl EvalConfig {
    pub fn check(&self) -> Vec<(&'static str, String)> {
        let mut errs = Vec::new();
        if self.num_predictions == 0 {
            errs.push(("num_predictions", "must be at least 1".to_string()));
        }
        if !(self.nms_threshold > 0.0) {
            errs.push(("nms_threshold", "must be positive".to_string()));
        }
        if !(self.miss_threshold > 0.0) {
            errs.push(("miss_threshold", "must be positive".to_string()));
        }
        errs
    }
}

/// Selected world-frame trajectories of one focal agent, by descending
/// confidence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub scene_id: String,
    pub agent_id: u64,
    pub category: String,
    pub trajectories: Vec<Vec<[f64; 2]>>,
    pub confidences: Vec<f64>,
}

impl PredictionSet {
    pub fn horizon(&self) -> usize {
        self.trajectories.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let what = format!("prediction for agent {} in scene {}", self.agent_id, self.scene_id);
        if self.trajectories.is_empty() || self.trajectories.len() != self.confidences.len() {
            return Err(Error::invalid(format!("{what}: trajectory and confidence counts disagree")));
        }
        let h = self.horizon();
        if h == 0 || self.trajectories.iter().any(|t| t.len() != h) {
            return Err(Error::invalid(format!("{what}: ragged or empty trajectories")));
        }
        if self.confidences.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid(format!("{what}: confidence outside [0, 1]")));
        }
        if self.confidences.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::invalid(format!("{what}: confidences not sorted")));
        }
        Ok(())
    }
}

/// Maps every mode's mean trajectory to the world frame and keeps the NMS
/// selection.
pub fn select_predictions(scene_id: &str, pred: &FocalPrediction, cfg: &EvalConfig) -> Result<PredictionSet> {
    let dist = &pred.distribution;
    let trajectories: Vec<Vec<[f64; 2]>> = (0..dist.num_modes())
        .map(|k| dist.mean_trajectory(k).into_iter().map(|p| pred.frame.to_world(p)).collect())
        .collect();
    let endpoints: Vec<[f64; 2]> = trajectories.iter().map(|t| t[t.len() - 1]).collect();
    let keep = nms_select(&endpoints, &dist.probs, cfg.num_predictions, cfg.nms_threshold)?;
    Ok(PredictionSet {
        scene_id: scene_id.to_string(),
        agent_id: pred.agent_id,
        category: pred.category.clone(),
        trajectories: keep.iter().map(|&k| trajectories[k].clone()).collect(),
        confidences: keep.iter().map(|&k| dist.probs[k].clamp(0.0, 1.0)).collect(),
    })
}

/// Prediction sets for every focal agent of every scene, in input order.
pub fn predict_scenes(
    model: &MotionModel,
    store: &ParameterStore,
    scenes: &[Scene],
    cfg: &EvalConfig,
) -> Result<Vec<PredictionSet>> {
    let mut out = Vec::new();
    for s in scenes {
        for p in model.predict(store, s)? {
            out.push(select_predictions(&s.id, &p, cfg)?);
        }
    }
    Ok(out)
}

pub fn evaluate(
    model: &MotionModel,
    store: &ParameterStore,
    scenes: &[Scene],
    cfg: &EvalConfig,
) -> Result<(Vec<PredictionSet>, MetricsReport)> {
    let sets = predict_scenes(model, store, scenes, cfg)?;
    let report = compute_metrics(&sets, scenes, cfg.miss_threshold)?;
    Ok((sets, report))
}
