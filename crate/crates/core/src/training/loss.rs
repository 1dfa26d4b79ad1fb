//! Deep-supervised GMM loss, mode classification and dense-future L1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{dense_targets, ModelOutput};
use crate::numerics::{Graph, Tensor, Var};
use crate::scene::Scene;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Index of the intention point nearest to `endpoint`, ties to the lower index.
pub fn select_positive_mode(endpoint: [f64; 2], points: &[[f64; 2]]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d = (p[0] - endpoint[0]).powi(2) + (p[1] - endpoint[1]).powi(2);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerLoss {
    pub nll: f64,
    pub classification: f64,
}

/// Loss values of one scene (or the mean over a batch).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean over layers of the positive component's NLL.
    pub gmm: f64,
    /// Mean over layers of `−log p_h`.
    pub classification: f64,
    pub dense: f64,
    pub per_layer: Vec<LayerLoss>,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.total, self.gmm, self.classification, self.dense].iter().all(|v| v.is_finite())
    }

    /// Running mean helper: adds `other · w`.
    pub fn accumulate(&mut self, other: &LossBreakdown, w: f64) {
        self.total += w * other.total;
        self.gmm += w * other.gmm;
        self.classification += w * other.classification;
        self.dense += w * other.dense;
        if self.per_layer.len() < other.per_layer.len() {
            self.per_layer.resize(other.per_layer.len(), LayerLoss::default());
        }
        for (a, b) in self.per_layer.iter_mut().zip(&other.per_layer) {
            a.nll += w * b.nll;
            a.classification += w * b.classification;
        }
    }
}

/// Graph nodes of the loss plus their values.
#[derive(Clone, Debug)]
pub struct SceneLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Mean over valid steps of the bivariate NLL of rows `raw` (`[n, T·5]`
/// channel-major raw head outputs) against `gt` (`[n, 2T]` as x then y),
/// with per-row step weights `w` (`[n, T]`, zero for invalid steps).
pub fn gaussian_nll(g: &mut Graph, raw: Var, gt: &Tensor, w: &[f64], horizon: usize) -> Result<Var> {
    let t = horizon;
    let mu_x = g.slice_cols(raw, 0, t)?;
    let mu_y = g.slice_cols(raw, t, t)?;
    let sx = g.slice_cols(raw, 2 * t, t)?;
    let sy = g.slice_cols(raw, 3 * t, t)?;
    let rho = g.slice_cols(raw, 4 * t, t)?;
    let sx = g.softplus(sx);
    let sx = g.add_scalar(sx, crate::decoder::SIGMA_FLOOR);
    let sy = g.softplus(sy);
    let sy = g.add_scalar(sy, crate::decoder::SIGMA_FLOOR);
    let rho = g.tanh(rho);
    let rho = g.scale(rho, crate::decoder::RHO_LIMIT);

    let n = gt.rows();
    let mut gx = Vec::with_capacity(n * t);
    let mut gy = Vec::with_capacity(n * t);
    for r in 0..n {
        gx.extend_from_slice(&gt.row(r)[..t]);
        gy.extend_from_slice(&gt.row(r)[t..]);
    }
    let gx = g.constant(Tensor::new(vec![n, t], gx)?);
    let gy = g.constant(Tensor::new(vec![n, t], gy)?);
    let dx = g.sub(gx, mu_x)?;
    let dx = g.div(dx, sx)?;
    let dy = g.sub(gy, mu_y)?;
    let dy = g.div(dy, sy)?;
    let dx2 = g.square(dx)?;
    let dy2 = g.square(dy)?;
    let dxy = g.mul(dx, dy)?;
    let rdxy = g.mul(rho, dxy)?;
    let rdxy = g.scale(rdxy, -2.0);
    let quad = g.add(dx2, dy2)?;
    let quad = g.add(quad, rdxy)?;
    let r2 = g.square(rho)?;
    let one_minus = g.scale(r2, -1.0);
    let one_minus = g.add_scalar(one_minus, 1.0);
    let quad = g.div(quad, one_minus)?;
    let log_sx = g.log(sx);
    let log_sy = g.log(sy);
    let log_one = g.log(one_minus);
    let log_one = g.scale(log_one, 0.5);
    let half_quad = g.scale(quad, 0.5);
    let nll = g.add(log_sx, log_sy)?;
    let nll = g.add(nll, log_one)?;
    let nll = g.add(nll, half_quad)?;
    let nll = g.add_scalar(nll, LN_2PI);
    g.weighted_sum(nll, w)
}

/// Mean absolute error over valid frames and all four channels.
pub fn dense_future_loss(g: &mut Graph, pred: Var, target: &Tensor, mask: &[bool]) -> Result<Var> {
    let n_valid = mask.iter().filter(|&&m| m).count();
    if g.value(pred).len() != target.len() || target.len() != mask.len() * 4 {
        return Err(Error::shape("dense_future_loss", "prediction, target and mask disagree"));
    }
    if n_valid == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let shape = g.shape(pred).to_vec();
    let t = g.constant(target.clone().reshape(&shape)?);
    let d = g.sub(pred, t)?;
    let d = g.abs(d);
    let w = 1.0 / (4 * n_valid) as f64;
    let weights: Vec<f64> = mask.iter().flat_map(|&m| [if m { w } else { 0.0 }; 4]).collect();
    g.weighted_sum(d, &weights)
}

/// `L_SUM` of one scene: the mean over decoder layers of (NLL + CE) over
/// focal agents with a valid final ground-truth frame, plus the dense-future
/// L1 (averaged over decoding passes).
pub fn scene_loss(g: &mut Graph, scene: &Scene, out: &ModelOutput) -> Result<SceneLoss> {
    let num_layers = out.groups[0].output.layers.len();
    let mut nll_terms: Vec<Vec<Var>> = vec![Vec::new(); num_layers];
    let mut ce_terms: Vec<Vec<Var>> = vec![Vec::new(); num_layers];
    let mut counted = 0usize;
    let mut dense_terms = Vec::new();

    for grp in &out.groups {
        let o = &grp.output;
        let h = o.horizon;
        let (tgt, mask) = crate::scene::future_targets(scene, &grp.focal_ids, &grp.focal_frames)?;
        let tf = scene.future_len();
        if tf != h {
            return Err(Error::shape("scene_loss", format!("scene has {tf} future frames, model predicts {h}")));
        }
        let mut rows = Vec::new();
        let mut gt = Vec::new();
        let mut step_w = Vec::new();
        let mut ce_w = vec![0.0; o.num_focal * o.num_modes];
        let mut agents = Vec::new();
        for t in 0..o.num_focal {
            let m = &mask[t * h..(t + 1) * h];
            if !m[h - 1] {
                continue;
            }
            let end = [tgt.data()[(t * h + h - 1) * 4], tgt.data()[(t * h + h - 1) * 4 + 1]];
            let pos = select_positive_mode(end, &grp.focal_points[t]);
            rows.push(t * o.num_modes + pos);
            agents.push((t, pos));
            let nv = m.iter().filter(|&&v| v).count() as f64;
            let mut row = Vec::with_capacity(2 * h);
            for s in 0..h {
                row.push(tgt.data()[(t * h + s) * 4]);
            }
            for s in 0..h {
                row.push(tgt.data()[(t * h + s) * 4 + 1]);
            }
            gt.push(row);
            step_w.extend(m.iter().map(|&v| if v { 1.0 / nv } else { 0.0 }));
        }
        for &(t, pos) in &agents {
            ce_w[t * o.num_modes + pos] = -1.0;
        }
        if !rows.is_empty() {
            let gt = Tensor::from_rows(&gt)?;
            for (l, layer) in o.layers.iter().enumerate() {
                let raw = g.gather_rows(layer.trajectories, &rows)?;
                nll_terms[l].push(gaussian_nll(g, raw, &gt, &step_w, h)?);
                ce_terms[l].push(g.weighted_sum(layer.log_probs, &ce_w)?);
            }
            counted += rows.len();
        }
        if let Some(pred) = grp.encoded.dense_future {
            let (t, m) = dense_targets(scene, grp)?;
            dense_terms.push(dense_future_loss(g, pred, &t, &m)?);
        }
    }

    let zero = g.constant(Tensor::scalar(0.0));
    let mean = |g: &mut Graph, terms: &[Var], denom: usize| -> Result<Var> {
        if terms.is_empty() || denom == 0 {
            return Ok(zero);
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t)?;
        }
        Ok(g.scale(acc, 1.0 / denom as f64))
    };
    let mut per_layer = Vec::with_capacity(num_layers);
    let mut layer_vars = Vec::with_capacity(num_layers);
    for l in 0..num_layers {
        let nll = mean(g, &nll_terms[l], counted)?;
        let ce = mean(g, &ce_terms[l], counted)?;
        per_layer.push(LayerLoss {
            nll: g.scalar(nll),
            classification: g.scalar(ce),
        });
        layer_vars.push((nll, ce));
    }
    let nlls: Vec<Var> = layer_vars.iter().map(|p| p.0).collect();
    let ces: Vec<Var> = layer_vars.iter().map(|p| p.1).collect();
    let gmm = mean(g, &nlls, num_layers)?;
    let cls = mean(g, &ces, num_layers)?;
    let dense = mean(g, &dense_terms, dense_terms.len())?;
    let total = g.add(gmm, cls)?;
    let total = g.add(total, dense)?;
    let breakdown = LossBreakdown {
        total: g.scalar(total),
        gmm: g.scalar(gmm),
        classification: g.scalar(cls),
        dense: g.scalar(dense),
        per_layer,
    };
    Ok(SceneLoss { total, breakdown })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw_rows(mu: &[(f64, f64)], raw_sigma: f64) -> Tensor {
        // One row, channel-major.
        let t = mu.len();
        let mut r = vec![0.0; 5 * t];
        for (s, &(x, y)) in mu.iter().enumerate() {
            r[s] = x;
            r[t + s] = y;
            r[2 * t + s] = raw_sigma;
            r[3 * t + s] = raw_sigma;
        }
        Tensor::new(vec![1, 5 * t], r).unwrap()
    }

    /// Raw value whose softplus plus the floor equals 1.
    fn unit_sigma_raw() -> f64 {
        ((1.0 - crate::decoder::SIGMA_FLOOR).exp() - 1.0).ln()
    }

    #[test]
    fn positive_mode_oracle() {
        assert_eq!(select_positive_mode([2.0, 0.0], &[[0.0, 0.0], [3.0, 0.0]]), 1);
        let pts = [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, -1.0]];
        assert_eq!(select_positive_mode([3.0, -1.0], &pts), 3);
        assert_eq!(select_positive_mode([0.5, 0.5], &[[0.0, 0.0], [1.0, 1.0]]), 0);
    }

    #[test]
    fn nll_at_mean_with_unit_scale_is_log_two_pi() {
        let mu = [(1.0, 2.0), (3.0, -1.0), (0.5, 0.5)];
        let mut g = Graph::new();
        let raw = g.constant(raw_rows(&mu, unit_sigma_raw()));
        let gt = Tensor::new(vec![1, 6], vec![1.0, 3.0, 0.5, 2.0, -1.0, 0.5]).unwrap();
        let nll = gaussian_nll(&mut g, raw, &gt, &[1.0 / 3.0; 3], 3).unwrap();
        assert!((g.scalar(nll) - (2.0 * std::f64::consts::PI).ln()).abs() < 1e-9);
    }

    #[test]
    fn nll_grows_with_distance_from_mean() {
        let mut last = f64::NEG_INFINITY;
        for off in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let mut g = Graph::new();
            let raw = g.constant(raw_rows(&[(0.0, 0.0)], 0.3));
            let gt = Tensor::new(vec![1, 2], vec![off, 0.0]).unwrap();
            let nll = gaussian_nll(&mut g, raw, &gt, &[1.0], 1).unwrap();
            let v = g.scalar(nll);
            assert!(v > last);
            last = v;
        }
    }

    #[test]
    fn nll_matches_closed_form_with_correlation() {
        let mut r = raw_rows(&[(0.3, -0.2)], 0.4);
        r.data_mut()[3] = -0.7;
        r.data_mut()[4] = 0.9;
        let step = crate::decoder::GaussianStep::from_raw(0.3, -0.2, 0.4, -0.7, 0.9);
        let mut g = Graph::new();
        let raw = g.constant(r);
        let gt = Tensor::new(vec![1, 2], vec![1.1, 0.4]).unwrap();
        let nll = gaussian_nll(&mut g, raw, &gt, &[1.0], 1).unwrap();
            let v = g.scalar(nll);
        assert!((v - step.nll(1.1, 0.4)).abs() < 1e-12);
        assert!((v + step.density(1.1, 0.4).ln()).abs() < 1e-12);
    }

    #[test]
    fn dense_loss_oracles() {
        let target = Tensor::new(vec![1, 2, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let mut shifted = target.clone();
        shifted.data_mut()[0] += 1.0;
        shifted.data_mut()[4] += 1.0;
        let mut g = Graph::new();
        let p = g.constant(target.clone().reshape(&[1, 8]).unwrap());
        let l = dense_future_loss(&mut g, p, &target, &[true, true]).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let p = g.constant(shifted.clone().reshape(&[1, 8]).unwrap());
        let l = dense_future_loss(&mut g, p, &target, &[true, true]).unwrap();
        assert!((g.scalar(l) - 0.25).abs() < 1e-15);

        // Corrupting an invalid frame changes nothing.
        let mut corrupt = shifted.clone();
        corrupt.data_mut()[5] = 1e6;
        let p = g.constant(corrupt.reshape(&[1, 8]).unwrap());
        let l = dense_future_loss(&mut g, p, &target, &[true, false]).unwrap();
        let a = g.scalar(l);
        assert!((a - 0.25).abs() < 1e-15);
    }
}
