//! Per-step bivariate Gaussian mixtures over future positions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::graph::softplus;

pub const SIGMA_FLOOR: f64 = 1e-3;
pub const RHO_LIMIT: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianStep {
    pub mu_x: f64,
    pub mu_y: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub rho: f64,
}

impl GaussianStep {
    /// Maps raw head outputs to a valid Gaussian.
    pub fn from_raw(mu_x: f64, mu_y: f64, raw_sx: f64, raw_sy: f64, raw_rho: f64) -> Self {
        Self {
            mu_x,
            mu_y,
            sigma_x: softplus(raw_sx) + SIGMA_FLOOR,
            sigma_y: softplus(raw_sy) + SIGMA_FLOOR,
            rho: RHO_LIMIT * raw_rho.tanh(),
        }
    }

    pub fn density(&self, x: f64, y: f64) -> f64 {
        let zx = (x - self.mu_x) / self.sigma_x;
        let zy = (y - self.mu_y) / self.sigma_y;
        let one = 1.0 - self.rho * self.rho;
        let q = (zx * zx + zy * zy - 2.0 * self.rho * zx * zy) / one;
        (-0.5 * q).exp() / (2.0 * std::f64::consts::PI * self.sigma_x * self.sigma_y * one.sqrt())
    }

    /// `−log f(x, y)`.
    pub fn nll(&self, x: f64, y: f64) -> f64 {
        let zx = (x - self.mu_x) / self.sigma_x;
        let zy = (y - self.mu_y) / self.sigma_y;
        let one = 1.0 - self.rho * self.rho;
        let q = (zx * zx + zy * zy - 2.0 * self.rho * zx * zy) / one;
        (2.0 * std::f64::consts::PI).ln() + self.sigma_x.ln() + self.sigma_y.ln() + 0.5 * one.ln() + 0.5 * q
    }
}

/// Mode probabilities plus `K × T` Gaussians for one agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDistribution {
    pub probs: Vec<f64>,
    pub modes: Vec<Vec<GaussianStep>>,
}

impl TrajectoryDistribution {
    pub fn num_modes(&self) -> usize {
        self.probs.len()
    }

    pub fn horizon(&self) -> usize {
        self.modes.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.probs.is_empty() || self.probs.len() != self.modes.len() {
            return Err(Error::invalid("mixture needs one probability per mode"));
        }
        if self.probs.iter().any(|&p| !(p >= 0.0)) || (self.probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("mode probabilities must be nonnegative and sum to 1"));
        }
        let t = self.horizon();
        for m in &self.modes {
            if m.len() != t {
                return Err(Error::invalid("modes have different horizons"));
            }
            for s in m {
                let finite = [s.mu_x, s.mu_y].iter().all(|v| v.is_finite());
                if !finite || !(s.sigma_x > 0.0) || !(s.sigma_y > 0.0) || !(s.rho.abs() < 1.0) {
                    return Err(Error::invalid("each Gaussian needs finite mean, positive scales and |rho| < 1"));
                }
            }
        }
        Ok(())
    }

    /// Endpoint of every mode's mean trajectory.
    pub fn endpoints(&self) -> Vec<[f64; 2]> {
        self.modes
            .iter()
            .map(|m| m.last().map_or([0.0, 0.0], |s| [s.mu_x, s.mu_y]))
            .collect()
    }

    pub fn mean_trajectory(&self, mode: usize) -> Vec<[f64; 2]> {
        self.modes[mode].iter().map(|s| [s.mu_x, s.mu_y]).collect()
    }
}

/// Mixture density at step `t`.
pub fn gmm_density(dist: &TrajectoryDistribution, t: usize, point: [f64; 2]) -> Result<f64> {
    dist.validate()?;
    if t >= dist.horizon() {
        return Err(Error::invalid(format!("step {t} beyond horizon {}", dist.horizon())));
    }
    Ok(dist
        .probs
        .iter()
        .zip(&dist.modes)
        .map(|(p, m)| p * m[t].density(point[0], point[1]))
        .sum())
}

/// Midpoint-rule integral of the mixture at step `t`, one `cells × cells`
/// grid per component covering ±`span` standard deviations. Integrating per
/// component keeps narrow components resolved when the mixture is wide.
pub fn integrate_density(dist: &TrajectoryDistribution, t: usize, span: f64, cells: usize) -> Result<f64> {
    dist.validate()?;
    if t >= dist.horizon() {
        return Err(Error::invalid(format!("step {t} beyond horizon {}", dist.horizon())));
    }
    let mut total = 0.0;
    for (p, m) in dist.probs.iter().zip(&dist.modes) {
        let s = m[t];
        let (ax, bx) = (s.mu_x - span * s.sigma_x, s.mu_x + span * s.sigma_x);
        let (ay, by) = (s.mu_y - span * s.sigma_y, s.mu_y + span * s.sigma_y);
        let hx = (bx - ax) / cells as f64;
        let hy = (by - ay) / cells as f64;
        let mut acc = 0.0;
        for i in 0..cells {
            let x = ax + (i as f64 + 0.5) * hx;
            for j in 0..cells {
                let y = ay + (j as f64 + 0.5) * hy;
                acc += s.density(x, y);
            }
        }
        total += p * acc * hx * hy;
    }
    Ok(total)
}
