//! Joint predictions for an interacting pair from two marginal sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointPrediction {
    pub a: usize,
    pub b: usize,
    pub confidence: f64,
}

/// Enumerates every pair, scores it by the product of marginal confidences
/// and returns the best `m` (ties by lower `a`, then lower `b`).
pub fn combine_joint(conf_a: &[f64], conf_b: &[f64], m: usize) -> Result<Vec<JointPrediction>> {
    if conf_a.is_empty() || conf_b.is_empty() {
        return Err(Error::invalid("joint combination needs two nonempty prediction sets"));
    }
    let mut all = Vec::with_capacity(conf_a.len() * conf_b.len());
    for (a, ca) in conf_a.iter().enumerate() {
        for (b, cb) in conf_b.iter().enumerate() {
            all.push(JointPrediction { a, b, confidence: ca * cb });
        }
    }
    all.sort_by(|x, y| y.confidence.total_cmp(&x.confidence).then((x.a, x.b).cmp(&(y.a, y.b))));
    all.truncate(m);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_case() {
        let j = combine_joint(&[0.6, 0.4], &[0.7, 0.3], 2).unwrap();
        let c: Vec<f64> = j.iter().map(|p| p.confidence).collect();
        assert!((c[0] - 0.42).abs() < 1e-15 && (c[1] - 0.28).abs() < 1e-15);
        assert_eq!((j[0].a, j[0].b, j[1].a, j[1].b), (0, 0, 1, 0));
    }

    #[test]
    fn six_by_six_enumerates_thirty_six() {
        let c = [0.3, 0.2, 0.2, 0.1, 0.1, 0.1];
        assert_eq!(combine_joint(&c, &c, 100).unwrap().len(), 36);
        assert_eq!(combine_joint(&c, &c, 6).unwrap().len(), 6);
    }

    #[test]
    fn singleton_factor_preserves_ranking() {
        let a = [0.1, 0.5, 0.3, 0.1];
        let j = combine_joint(&a, &[0.5], 4).unwrap();
        assert_eq!(j.iter().map(|p| p.a).collect::<Vec<_>>(), vec![1, 2, 0, 3]);
        for p in &j {
            assert_eq!(p.confidence, a[p.a] * 0.5);
        }
    }

    #[test]
    fn empty_side_is_rejected() {
        assert!(combine_joint(&[], &[1.0], 1).is_err());
    }
}
