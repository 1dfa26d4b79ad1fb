//! Marginal displacement metrics, simplified mAP and intent coverage.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::PredictionSet;
use crate::error::{Error, Result};
use crate::scene::Scene;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub average_precision: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    /// Focal agents with recorded alternative intents.
    pub agents: usize,
    /// Agents whose every alternative endpoint has a prediction within the threshold.
    pub all_covered: usize,
    pub rate: f64,
    /// Mean fraction of alternatives covered per agent.
    pub mean_fraction: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub map: f64,
    pub samples: usize,
    /// Agents skipped because their final ground-truth step is invalid.
    pub excluded: usize,
    pub miss_threshold: f64,
    pub per_category: BTreeMap<String, CategoryMetrics>,
    pub coverage: CoverageReport,
}

/// Per-trajectory mean displacement over valid steps and final displacement.
fn displacements(traj: &[[f64; 2]], gt: &[([f64; 2], bool)]) -> (f64, f64) {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, (g, valid)) in traj.iter().zip(gt) {
        if *valid {
            sum += dist(*p, *g);
            n += 1;
        }
    }
    let fde = dist(traj[traj.len() - 1], gt[gt.len() - 1].0);
    (sum / n.max(1) as f64, fde)
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// All-point interpolated area under the precision-recall curve.
///
/// `ranked` holds `(confidence, gt index, hit)` for every prediction; the
/// first hit on each ground truth in descending-confidence order is a true
/// positive, later hits on it are false positives.
pub fn average_precision(ranked: &[(f64, usize, bool)], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..ranked.len()).collect();
    order.sort_by(|&a, &b| ranked[b].0.total_cmp(&ranked[a].0).then(a.cmp(&b)));
    let mut matched = vec![false; num_gt];
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(order.len());
    for (n, &i) in order.iter().enumerate() {
        let (_, gt, hit) = ranked[i];
        if hit && !matched[gt] {
            matched[gt] = true;
            tp += 1;
        }
        curve.push((tp as f64 / num_gt as f64, tp as f64 / (n + 1) as f64));
    }
    let mut best = 0.0f64;
    for c in curve.iter_mut().rev() {
        best = best.max(c.1);
        c.1 = best;
    }
    let mut ap = 0.0;
    let mut last_recall = 0.0;
    for (r, p) in curve {
        ap += (r - last_recall) * p;
        last_recall = r;
    }
    ap
}

/// Does any predicted endpoint lie within `threshold` of `target`?
fn covered(set: &PredictionSet, target: [f64; 2], threshold: f64) -> bool {
    set.trajectories.iter().any(|t| t.last().is_some_and(|&e| dist(e, target) < threshold))
}

#[derive(Default)]
struct Acc {
    ade: f64,
    fde: f64,
    misses: usize,
    samples: usize,
    ranked: Vec<(f64, usize, bool)>,
}

/// Scores prediction sets against the scenes' ground truth. Coverage counts,
/// for focal agents with generator metadata, whether every alternative intent
/// endpoint is matched by some prediction within `miss_threshold`.
pub fn compute_metrics(sets: &[PredictionSet], scenes: &[Scene], miss_threshold: f64) -> Result<MetricsReport> {
    if !(miss_threshold > 0.0) {
        return Err(Error::invalid(format!("miss threshold must be positive, got {miss_threshold}")));
    }
    let by_id: BTreeMap<&str, &Scene> = scenes.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut cats: BTreeMap<String, Acc> = BTreeMap::new();
    let mut excluded = 0;
    let mut coverage = CoverageReport::default();
    let mut fraction_sum = 0.0;
    for set in sets {
        set.validate()?;
        let scene = by_id
            .get(set.scene_id.as_str())
            .ok_or_else(|| Error::invalid(format!("predictions reference unknown scene `{}`", set.scene_id)))?;
        let track = scene.agent(set.agent_id)?;
        let gt: Vec<([f64; 2], bool)> = track.future.iter().map(|f| ([f.x, f.y], f.valid)).collect();
        if gt.last().is_none_or(|g| !g.1) {
            excluded += 1;
            continue;
        }
        if set.horizon() != gt.len() {
            return Err(Error::shape(
                "compute_metrics",
                format!("{} predicted steps vs {} ground-truth steps", set.horizon(), gt.len()),
            ));
        }
        let acc = cats.entry(set.category.clone()).or_default();
        let gt_index = acc.samples;
        let mut best_ade = f64::INFINITY;
        let mut best_fde = f64::INFINITY;
        for (traj, &conf) in set.trajectories.iter().zip(&set.confidences) {
            let (ade, fde) = displacements(traj, &gt);
            best_ade = best_ade.min(ade);
            best_fde = best_fde.min(fde);
            acc.ranked.push((conf, gt_index, fde < miss_threshold));
        }
        acc.ade += best_ade;
        acc.fde += best_fde;
        acc.misses += usize::from(best_fde >= miss_threshold);
        acc.samples += 1;

        let intents = scene
            .meta
            .as_ref()
            .and_then(|m| m.focal_intents.iter().find(|f| f.agent_id == set.agent_id));
        if let Some(fi) = intents.filter(|fi| !fi.alternatives.is_empty()) {
            let hit = fi
                .alternatives
                .iter()
                .filter(|a| covered(set, a.endpoint, miss_threshold))
                .count();
            coverage.agents += 1;
            coverage.all_covered += usize::from(hit == fi.alternatives.len());
            fraction_sum += hit as f64 / fi.alternatives.len() as f64;
        }
    }
    if coverage.agents > 0 {
        coverage.rate = coverage.all_covered as f64 / coverage.agents as f64;
        coverage.mean_fraction = fraction_sum / coverage.agents as f64;
    }

    let mut report = MetricsReport {
        excluded,
        miss_threshold,
        coverage,
        ..MetricsReport::default()
    };
    let mut ap_sum = 0.0;
    for (name, acc) in cats {
        let n = acc.samples as f64;
        let cm = CategoryMetrics {
            min_ade: acc.ade / n,
            min_fde: acc.fde / n,
            miss_rate: acc.misses as f64 / n,
            average_precision: average_precision(&acc.ranked, acc.samples),
            samples: acc.samples,
        };
        report.min_ade += acc.ade;
        report.min_fde += acc.fde;
        report.miss_rate += acc.misses as f64;
        report.samples += acc.samples;
        ap_sum += cm.average_precision;
        report.per_category.insert(name, cm);
    }
    if report.samples > 0 {
        let n = report.samples as f64;
        report.min_ade /= n;
        report.min_fde /= n;
        report.miss_rate /= n;
        report.map = ap_sum / report.per_category.len() as f64;
    }
    Ok(report)
}
