//! Intention points: k-means centers of ground-truth endpoints, per category.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::Pose;

const MAX_ITERATIONS: usize = 100;

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn nearest(p: [f64; 2], centers: &[[f64; 2]]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &c) in centers.iter().enumerate() {
        let d = dist2(p, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Lloyd's k-means with k-means++ seeding. Ties in assignment go to the lower
/// center index and an emptied cluster keeps its previous center. Centers are
/// returned sorted lexicographically.
pub fn kmeans(points: &[[f64; 2]], k: usize, seed: u64) -> Result<Vec<[f64; 2]>> {
    if k == 0 {
        return Err(Error::invalid("k-means needs at least one cluster"));
    }
    if points.len() < k {
        return Err(Error::invalid(format!("{} endpoints cannot form {k} clusters", points.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![points[rng.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|&p| dist2(p, centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            // All remaining points coincide with a center.
            rng.random_range(0..points.len())
        } else {
            let mut u = rng.random::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        };
        let c = points[pick];
        centers.push(c);
        for (d, &p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, c));
        }
    }

    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..MAX_ITERATIONS {
        let mut changed = false;
        for (a, &p) in assign.iter_mut().zip(points) {
            let n = nearest(p, &centers);
            if *a != n {
                *a = n;
                changed = true;
            }
        }
        let mut sums = vec![[0.0, 0.0]; k];
        let mut counts = vec![0usize; k];
        for (&a, &p) in assign.iter().zip(points) {
            sums[a][0] += p[0];
            sums[a][1] += p[1];
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = [sums[c][0] / counts[c] as f64, sums[c][1] / counts[c] as f64];
            }
        }
        if !changed {
            break;
        }
    }
    centers.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    Ok(centers)
}

/// `K` points per agent category, in the agent's local frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentionPoints {
    pub k: usize,
    pub per_category: BTreeMap<String, Vec<[f64; 2]>>,
}

impl IntentionPoints {
    /// Clusters local-frame endpoints grouped by category.
    pub fn generate(endpoints: &BTreeMap<String, Vec<[f64; 2]>>, k: usize, seed: u64) -> Result<Self> {
        let mut per_category = BTreeMap::new();
        for (cat, pts) in endpoints {
            let centers = kmeans(pts, k, seed)
                .map_err(|e| Error::invalid(format!("category `{cat}`: {e}")))?;
            per_category.insert(cat.clone(), centers);
        }
        if per_category.is_empty() {
            return Err(Error::invalid("no endpoints to cluster"));
        }
        Ok(Self { k, per_category })
    }

    pub fn for_category(&self, category: &str) -> Result<&[[f64; 2]]> {
        self.per_category
            .get(category)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("no intention points for category `{category}`")))
    }
}

/// Places local intention points into a common frame: each point is rotated by
/// its agent's heading and shifted by its position. Every point inherits the
/// agent heading.
pub fn globalize_intention_points(local: &[[f64; 2]], pose: &Pose) -> Vec<Pose> {
    local.iter().map(|&p| Pose::new(pose.to_world(p), pose.heading)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn single_cluster_is_mean() {
        let pts = [[0.0, 0.0], [2.0, 0.0], [1.0, 3.0]];
        let c = kmeans(&pts, 1, 0).unwrap();
        assert!((c[0][0] - 1.0).abs() < 1e-12 && (c[0][1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_clusters_match_partition_oracle() {
        let pts = [[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]];
        let c = kmeans(&pts, 2, 3).unwrap();
        assert_eq!(c, vec![[0.0, 0.5], [10.0, 0.5]]);
    }

    #[test]
    fn too_few_endpoints_rejected() {
        assert!(kmeans(&[[0.0, 0.0]], 2, 0).is_err());
    }

    #[test]
    fn globalize_oracle() {
        let p = Pose::new([5.0, 5.0], FRAC_PI_2);
        let g = globalize_intention_points(&[[1.0, 0.0]], &p);
        assert!((g[0].position[0] - 5.0).abs() < 1e-12 && (g[0].position[1] - 6.0).abs() < 1e-12);
        assert_eq!(g[0].heading, p.heading);
        let back = p.to_local(g[0].position);
        assert!((back[0] - 1.0).abs() < 1e-12 && back[1].abs() < 1e-12);
    }
}
