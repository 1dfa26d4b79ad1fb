//! Central finite-difference oracle for tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::ParameterStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Entries probed per parameter tensor; tensors at or below this size are checked fully.
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            tolerance: 1e-4,
            samples_per_tensor: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckSample {
    pub parameter: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    pub worst: Option<GradCheckSample>,
    pub passed: bool,
}

/// Relative error with an absolute floor so that two near-zero values agree.
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Smallest gradient magnitude a central difference resolves to `tolerance`.
/// Rounding in a loss built from `ops` recorded operations is modeled as a
/// random walk of size `sqrt(ops) · |loss| · ε_mach`, and the difference
/// quotient divides it by `epsilon`.
fn resolution_floor(loss: f64, ops: usize, cfg: &GradCheckConfig) -> f64 {
    let noise = (ops.max(1) as f64).sqrt() * loss.abs().max(1.0) * f64::EPSILON / cfg.epsilon;
    (noise / cfg.tolerance).max(1e-6)
}

fn eval<F>(store: &ParameterStore, loss_fn: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let l = loss_fn(&mut g, store)?;
    let v = g.scalar(l);
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {v}")));
    }
    Ok(v)
}

/// Compares tape gradients of `loss_fn` against central differences on a
/// seeded random subset of entries of every parameter.
pub fn gradient_check<F>(store: &ParameterStore, loss_fn: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&cfg.epsilon) {
        return Err(Error::Config(format!("epsilon {} outside [1e-7, 1e-4]", cfg.epsilon)));
    }
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    if !g.scalar(loss).is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {}", g.scalar(loss))));
    }
    let grads = g.backward(loss)?.param_grads(&g);
    let floor = resolution_floor(g.scalar(loss), g.len(), &cfg);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = store.clone();
    let mut max_err: f64 = 0.0;
    let mut worst = None;
    let mut checked = 0;
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let len = store.get(&name)?.len();
        let picks: Vec<usize> = if len <= cfg.samples_per_tensor {
            (0..len).collect()
        } else {
            let mut p = sample(&mut rng, len, cfg.samples_per_tensor).into_vec();
            p.sort_unstable();
            p
        };
        for idx in picks {
            let base = store.get(&name)?.data()[idx];
            probe.get_mut(&name)?.data_mut()[idx] = base + cfg.epsilon;
            let up = eval(&probe, &loss_fn)?;
            probe.get_mut(&name)?.data_mut()[idx] = base - cfg.epsilon;
            let down = eval(&probe, &loss_fn)?;
            probe.get_mut(&name)?.data_mut()[idx] = base;
            let numeric = (up - down) / (2.0 * cfg.epsilon);
            let analytic = grads.get(&name).map_or(0.0, |t| t.data()[idx]);
            let err = relative_error(analytic, numeric, floor);
            checked += 1;
            if err > max_err || worst.is_none() {
                max_err = max_err.max(err);
                worst = Some(GradCheckSample {
                    parameter: name.clone(),
                    index: idx,
                    analytic,
                    numeric,
                    relative_error: err,
                });
            }
        }
    }
    Ok(GradCheckReport {
        max_relative_error: max_err,
        checked,
        worst,
        passed: max_err < cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::layers::{Activation, LayerNorm, Mlp};
    use crate::numerics::tensor::Tensor;

    #[test]
    fn quadratic_loss_is_exact() {
        let mut store = ParameterStore::new(2);
        store.init_uniform_weight("theta", 3, 4).unwrap();
        let report = gradient_check(
            &store,
            |g, s| {
                let t = g.param(s, "theta")?;
                let sq = g.square(t)?;
                Ok(g.sum_all(sq))
            },
            GradCheckConfig {
                samples_per_tensor: 12,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(report.checked, 12);
        assert!(report.max_relative_error < 1e-8, "{report:?}");
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut store = ParameterStore::new(2);
        store.init_uniform_weight("theta", 2, 2).unwrap();
        let mut g = Graph::new();
        let _ = g.param(&store, "theta").unwrap();
        let c = g.constant(Tensor::scalar(3.0));
        let bp = g.backward(c).unwrap();
        for t in bp.param_grads(&g).values() {
            assert!(t.data().iter().all(|v| v.abs() < 1e-10));
        }
        let report = gradient_check(&store, |g, _| Ok(g.constant(Tensor::scalar(3.0))), Default::default()).unwrap();
        assert!(report.passed);
    }

    #[test]
    fn mlp_with_layer_norm_passes() {
        let mut store = ParameterStore::new(9);
        let mlp = Mlp::new(&mut store, "m", &[3, 6, 2], Activation::Tanh).unwrap();
        let ln = LayerNorm::new(&mut store, "ln", 2).unwrap();
        let x = Tensor::from_rows(&[vec![0.3, -0.7, 1.1], vec![0.5, 0.2, -0.4]]).unwrap();
        let report = gradient_check(
            &store,
            |g, s| {
                let xv = g.constant(x.clone());
                let h = mlp.forward(g, s, xv)?;
                let h = ln.forward(g, s, h)?;
                let h = g.tanh(h);
                Ok(g.weighted_sum(h, &[0.3, -1.0, 0.7, 0.2])?)
            },
            GradCheckConfig {
                samples_per_tensor: 32,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn non_finite_loss_is_a_diagnostic_failure() {
        let mut store = ParameterStore::new(2);
        store.init_constant("theta", &[1], 0.0).unwrap();
        let err = gradient_check(
            &store,
            |g, s| {
                let t = g.param(s, "theta")?;
                Ok(g.log(t))
            },
            Default::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn epsilon_range_is_enforced() {
        let store = ParameterStore::new(0);
        let cfg = GradCheckConfig {
            epsilon: 1e-2,
            ..Default::default()
        };
        assert!(gradient_check(&store, |g, _| Ok(g.constant(Tensor::scalar(0.0))), cfg).is_err());
    }
}
