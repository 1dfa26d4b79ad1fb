//! Losses, optimizer and the training loop.

mod loss;
mod optim;

use std::io::Write;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{dense_future_loss, gaussian_nll, scene_loss, select_positive_mode, LayerLoss, LossBreakdown, SceneLoss};
pub use optim::{accumulate, clip_global_norm, global_norm, scheduled_lr, AdamW};

use crate::error::{Error, Result};
use crate::model::MotionModel;
use crate::numerics::{Gradients, Graph, ParameterStore};
use crate::scene::Scene;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub decay_factor: f64,
    /// First (1-based) epoch trained at the decayed rate.
    pub decay_start: usize,
    pub decay_every: usize,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 0.01,
            batch_size: 80,
            epochs: 30,
            decay_factor: 0.5,
            decay_start: 20,
            decay_every: 2,
            clip_norm: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Vec<(&'static str, String)> {
        let mut errs = Vec::new();
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            errs.push(("learning_rate", "must be finite and nonnegative".to_string()));
        }
        if !(self.weight_decay >= 0.0) {
            errs.push(("weight_decay", "must be nonnegative".to_string()));
        }
        if self.batch_size == 0 {
            errs.push(("batch_size", "must be at least 1".to_string()));
        }
        if self.epochs == 0 {
            errs.push(("epochs", "must be at least 1".to_string()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            errs.push(("decay_factor", "must be in (0, 1]".to_string()));
        }
        if self.decay_every == 0 {
            errs.push(("decay_every", "must be at least 1".to_string()));
        }
        if !(self.clip_norm > 0.0) {
            errs.push(("clip_norm", "must be positive".to_string()));
        }
        errs
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        scheduled_lr(self.learning_rate, epoch, self.decay_start, self.decay_every, self.decay_factor)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over the epoch's scenes of the pre-update loss.
    pub loss: LossBreakdown,
    pub seconds: f64,
}

/// Loss and gradients of one scene.
pub fn scene_gradients(model: &MotionModel, store: &ParameterStore, scene: &Scene) -> Result<(LossBreakdown, Gradients)> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, store, scene)?;
    let l = scene_loss(&mut g, scene, &out)?;
    if !l.breakdown.is_finite() {
        return Err(Error::NonFinite(format!("scene {}: {:?}", scene.id, l.breakdown)));
    }
    let grads = g.backward(l.total)?.param_grads(&g);
    Ok((l.breakdown, grads))
}

/// Mean loss over `scenes` without gradients.
pub fn evaluate_loss(model: &MotionModel, store: &ParameterStore, scenes: &[Scene]) -> Result<LossBreakdown> {
    let mut acc = LossBreakdown::default();
    let w = 1.0 / scenes.len().max(1) as f64;
    for s in scenes {
        let mut g = Graph::inference();
        let out = model.forward(&mut g, store, s)?;
        acc.accumulate(&scene_loss(&mut g, s, &out)?.breakdown, w);
    }
    Ok(acc)
}

/// Optimizer state carried across epochs, so training can be interleaved
/// with evaluation.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    seed: u64,
    opt: AdamW,
    epoch: usize,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, seed: u64) -> Result<Self> {
        if let Some((f, m)) = cfg.check().into_iter().next() {
            return Err(Error::Config(format!("train.{f}: {m}")));
        }
        Ok(Self {
            cfg: cfg.clone(),
            seed,
            opt: AdamW::new(cfg.weight_decay),
            epoch: 0,
        })
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    /// One pass over `scenes`. The order is shuffled from the seed and epoch
    /// number; batches average per-scene gradients in a fixed order.
    pub fn run_epoch(&mut self, model: &MotionModel, store: &mut ParameterStore, scenes: &[Scene]) -> Result<EpochLog> {
        if scenes.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        self.epoch += 1;
        let epoch = self.epoch;
        let started = Instant::now();
        let lr = self.cfg.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = LossBreakdown::default();
        let n = scenes.len() as f64;
        for (b, batch) in order.chunks(self.cfg.batch_size).enumerate() {
            let w = 1.0 / batch.len() as f64;
            let mut grads = Gradients::new();
            for &i in batch {
                let (l, g) = scene_gradients(model, store, &scenes[i]).map_err(|e| match e {
                    Error::NonFinite(msg) => {
                        let ids: Vec<&str> = batch.iter().map(|&j| scenes[j].id.as_str()).collect();
                        Error::NonFinite(format!("epoch {epoch}, batch {b} {ids:?}: {msg}"))
                    }
                    other => other,
                })?;
                accumulate(&mut grads, &g, w);
                epoch_loss.accumulate(&l, 1.0 / n);
            }
            let norm = clip_global_norm(&mut grads, self.cfg.clip_norm);
            debug!("epoch {epoch} batch {b}: grad norm {norm:.4}");
            self.opt.step(store, &grads, lr)?;
        }
        let log = EpochLog {
            epoch,
            lr,
            loss: epoch_loss,
            seconds: started.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}: L_SUM {:.4} (gmm {:.4}, cls {:.4}, dense {:.4}) lr {lr:.2e} in {:.1}s",
            log.loss.total, log.loss.gmm, log.loss.classification, log.loss.dense, log.seconds
        );
        Ok(log)
    }
}

/// Trains in place for the configured number of epochs.
pub fn train(
    model: &MotionModel,
    store: &mut ParameterStore,
    scenes: &[Scene],
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    let mut trainer = Trainer::new(cfg, seed)?;
    let mut logs = Vec::with_capacity(cfg.epochs);
    while !trainer.finished() {
        let log = trainer.run_epoch(model, store, scenes)?;
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// CSV of `(epoch, L_SUM, L_GMM, classification, L_DMP, lr)`, preceded by
/// `#`-prefixed header comments.
pub fn write_training_log(mut w: impl Write, comments: &[String], logs: &[EpochLog]) -> Result<()> {
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    writeln!(w, "epoch,l_sum,l_gmm,classification,l_dmp,lr")?;
    for l in logs {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            l.epoch, l.loss.total, l.loss.gmm, l.loss.classification, l.loss.dense, l.lr
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
