//! Endpoint non-maximum suppression.

use crate::error::{Error, Result};

/// Candidate indices ordered by descending confidence, ties by lower index.
pub fn confidence_order(confidences: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..confidences.len()).collect();
    order.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]).then(a.cmp(&b)));
    order
}

/// Greedy selection of at most `m` candidates whose endpoints are pairwise at
/// least `threshold` apart. A candidate closer than `threshold` to an already
/// kept endpoint is suppressed. When fewer than `m` survive, the
/// highest-confidence suppressed candidates fill the remaining slots. The
/// result is ordered by descending confidence.
pub fn nms_select(endpoints: &[[f64; 2]], confidences: &[f64], m: usize, threshold: f64) -> Result<Vec<usize>> {
    if endpoints.len() != confidences.len() {
        return Err(Error::shape("nms_select", "endpoint and confidence counts differ"));
    }
    if !(threshold > 0.0) {
        return Err(Error::invalid(format!("NMS threshold must be positive, got {threshold}")));
    }
    let order = confidence_order(confidences);
    if m >= endpoints.len() {
        return Ok(order);
    }
    let mut kept: Vec<usize> = Vec::with_capacity(m);
    let mut suppressed = Vec::new();
    for &i in &order {
        if kept.len() == m {
            break;
        }
        let close = kept.iter().any(|&j| {
            let dx = endpoints[i][0] - endpoints[j][0];
            let dy = endpoints[i][1] - endpoints[j][1];
            (dx * dx + dy * dy).sqrt() < threshold
        });
        if close {
            suppressed.push(i);
        } else {
            kept.push(i);
        }
    }
    let missing = m - kept.len();
    kept.extend(suppressed.into_iter().take(missing));
    kept.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]).then(a.cmp(&b)));
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_case() {
        let e = [[0.0, 0.0], [1.0, 0.0], [5.0, 0.0]];
        assert_eq!(nms_select(&e, &[0.9, 0.8, 0.5], 2, 2.5).unwrap(), vec![0, 2]);
    }

    #[test]
    fn far_apart_is_top_m() {
        let e = [[0.0, 0.0], [10.0, 0.0], [20.0, 0.0], [30.0, 0.0]];
        assert_eq!(nms_select(&e, &[0.1, 0.4, 0.3, 0.2], 2, 2.5).unwrap(), vec![1, 2]);
    }

    #[test]
    fn duplicates_collapse_before_backfill() {
        let e = [[1.0, 1.0]; 4];
        let c = [0.4, 0.3, 0.2, 0.1];
        assert_eq!(nms_select(&e, &c, 1, 2.5).unwrap(), vec![0]);
        // With room for three, two come from backfill in confidence order.
        assert_eq!(nms_select(&e, &c, 3, 2.5).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn backfill_is_resorted_by_confidence() {
        // 1 is suppressed by 0; 2 survives; backfill brings 1 ahead of 2.
        let e = [[0.0, 0.0], [0.5, 0.0], [9.0, 0.0]];
        assert_eq!(nms_select(&e, &[0.5, 0.4, 0.1], 3, 2.5).unwrap(), vec![0, 1, 2]);
        let e = [[0.0, 0.0], [0.5, 0.0], [9.0, 0.0], [0.7, 0.0]];
        assert_eq!(nms_select(&e, &[0.5, 0.4, 0.1, 0.05], 3, 2.5).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn exact_threshold_distance_is_kept() {
        let e = [[0.0, 0.0], [2.5, 0.0]];
        assert_eq!(nms_select(&e, &[0.6, 0.4], 1, 2.5).unwrap(), vec![0]);
        let e = [[0.0, 0.0], [2.5, 0.0], [1.0, 0.0]];
        assert_eq!(nms_select(&e, &[0.6, 0.4, 0.3], 2, 2.5).unwrap(), vec![0, 1]);
    }

    #[test]
    fn m_beyond_count_returns_all() {
        let e = [[0.0, 0.0], [0.1, 0.0]];
        assert_eq!(nms_select(&e, &[0.2, 0.8], 6, 2.5).unwrap(), vec![1, 0]);
    }

    #[test]
    fn rejects_bad_threshold() {
        assert!(nms_select(&[[0.0, 0.0]], &[1.0], 1, 0.0).is_err());
    }
}
