//! Relative poses, rigid scene transforms and k-nearest-neighbor lists.

use super::types::{wrap_angle, Pose, Scene};

/// Pose of `j` seen from `i`: the offset rotated into `i`'s frame and the
/// heading difference wrapped to `(−π, π]`.
pub fn relative_pose(i: &Pose, j: &Pose) -> ([f64; 2], f64) {
    (i.to_local(j.position), wrap_angle(j.heading - i.heading))
}

/// Applies the rigid motion `t` (rotate by `t.heading`, then translate by
/// `t.position`) to every world-frame quantity of a scene.
pub fn transform_scene(scene: &Scene, t: &Pose) -> Scene {
    let mut out = scene.clone();
    for a in &mut out.agents {
        for s in &mut a.history {
            if !s.valid {
                continue;
            }
            let p = t.to_world([s.x, s.y]);
            let v = t.vec_to_world([s.vx, s.vy]);
            s.x = p[0];
            s.y = p[1];
            s.vx = v[0];
            s.vy = v[1];
            s.heading = wrap_angle(s.heading + t.heading);
        }
        for s in &mut a.future {
            if !s.valid {
                continue;
            }
            let p = t.to_world([s.x, s.y]);
            let v = t.vec_to_world([s.vx, s.vy]);
            s.x = p[0];
            s.y = p[1];
            s.vx = v[0];
            s.vy = v[1];
        }
    }
    for pl in &mut out.map {
        for p in &mut pl.points {
            let q = t.to_world([p.x, p.y]);
            p.x = q[0];
            p.y = q[1];
        }
    }
    if let Some(meta) = &mut out.meta {
        for f in &mut meta.focal_intents {
            for alt in &mut f.alternatives {
                alt.endpoint = t.to_world(alt.endpoint);
            }
        }
    }
    out
}

/// Squared distance snapped to a 1e-6 m² grid so that exact geometric ties
/// stay ties after a rigid transform perturbs the last few bits.
pub(crate) fn distance_key(a: [f64; 2], b: [f64; 2]) -> i64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    ((dx * dx + dy * dy) * 1e6).round() as i64
}

/// For every token, the `k` nearest tokens (itself included), nearest first,
/// ties broken by lower index. With fewer than `k` tokens every token is listed.
pub fn knn_neighborhoods(positions: &[[f64; 2]], k: usize) -> Vec<Vec<usize>> {
    knn_between(positions, positions, k)
}

/// For every query point, the `k` nearest of `keys`.
pub fn knn_between(queries: &[[f64; 2]], keys: &[[f64; 2]], k: usize) -> Vec<Vec<usize>> {
    let k = k.max(1).min(keys.len());
    let mut order: Vec<(i64, usize)> = Vec::with_capacity(keys.len());
    queries
        .iter()
        .map(|&q| {
            order.clear();
            order.extend(keys.iter().enumerate().map(|(j, &p)| (distance_key(q, p), j)));
            if k < order.len() {
                order.select_nth_unstable(k - 1);
                order.truncate(k);
            }
            order.sort_unstable();
            order.iter().map(|&(_, j)| j).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn self_pair_is_zero() {
        let p = Pose::new([3.0, -2.0], 1.1);
        assert_eq!(relative_pose(&p, &p), ([0.0, 0.0], 0.0));
    }

    #[test]
    fn rotation_oracle() {
        let i = Pose::new([1.0, 0.0], FRAC_PI_2);
        let j = Pose::new([1.0, 1.0], PI);
        let (rp, ra) = relative_pose(&i, &j);
        assert!((rp[0] - 1.0).abs() < 1e-12 && rp[1].abs() < 1e-12);
        assert!((ra - FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn knn_small_case() {
        let nb = knn_neighborhoods(&[[0.0, 0.0], [1.0, 0.0], [10.0, 0.0]], 2);
        assert_eq!(nb[0], vec![0, 1]);
        assert_eq!(nb[2], vec![2, 1]);
        let all = knn_neighborhoods(&[[0.0, 0.0], [1.0, 0.0], [10.0, 0.0]], 5);
        assert!(all.iter().all(|l| l.len() == 3));
    }
}
