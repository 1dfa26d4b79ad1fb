//! AdamW with decoupled weight decay, global-norm clipping and the step decay
//! learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::numerics::{Gradients, ParameterStore, Tensor};

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Parameters without a gradient only decay.
    pub fn step(&mut self, store: &mut ParameterStore, grads: &Gradients, lr: f64) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in names {
            let p = store.get_mut(&name)?;
            let n = p.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let g = grads.get(&name);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |t| t.data()[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *w -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * *w);
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &Gradients) -> f64 {
    grads.values().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Adds `other · w` into `acc`.
pub fn accumulate(acc: &mut Gradients, other: &Gradients, w: f64) {
    for (k, t) in other {
        match acc.get_mut(k) {
            Some(a) => a.data_mut().iter_mut().zip(t.data()).for_each(|(x, y)| *x += w * y),
            None => {
                let scaled = t.data().iter().map(|v| v * w).collect();
                acc.insert(k.clone(), Tensor::new(t.shape().to_vec(), scaled).expect("same shape"));
            }
        }
    }
}

/// Learning rate for 1-based `epoch`: the base rate until `decay_start`, then
/// multiplied by `factor` at `decay_start` and every `decay_every` epochs after.
pub fn scheduled_lr(base: f64, epoch: usize, decay_start: usize, decay_every: usize, factor: f64) -> f64 {
    if epoch < decay_start || decay_every == 0 {
        return base;
    }
    base * factor.powi(((epoch - decay_start) / decay_every + 1) as i32)
}
