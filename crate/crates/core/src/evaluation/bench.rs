//! Latency and attention-memory benchmarks: per-focal re-encoding against one
//! shared symmetric encoding, and local against dense attention.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::IntentionPoints;
use crate::error::{Error, Result};
use crate::model::{collect_endpoints, collect_predictions, ModelConfig, ModelMode, MotionModel};
use crate::numerics::{Graph, MultiHeadAttention, Neighborhoods, ParameterStore, Tensor};
use crate::scene::{generate_synthetic_scene, knn_neighborhoods, to_polyline_frames, vectorize_focal, GeneratorConfig};

/// Below this median a timing is treated as unresolved and re-measured with
/// more repetitions.
const MIN_RESOLVABLE_SECONDS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub focal_counts: Vec<usize>,
    /// Agents in the fixed benchmark scene; must cover the largest focal count.
    pub num_agents: usize,
    pub repetitions: usize,
    pub warmup: usize,
    /// Token counts for the attention memory sweep.
    pub memory_tokens: Vec<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            focal_counts: vec![8, 16, 32],
            num_agents: 32,
            repetitions: 5,
            warmup: 1,
            memory_tokens: vec![64, 128, 256, 512],
        }
    }
}

impl BenchConfig {
    pub fn check(&self) -> Vec<(&'static str, String)> {
        let mut errs = Vec::new();
        if self.focal_counts.is_empty() || self.focal_counts.contains(&0) {
            errs.push(("focal_counts", "must be nonempty and positive".to_string()));
        }
        if self.focal_counts.iter().any(|&c| c > self.num_agents) {
            errs.push(("num_agents", "must be at least the largest focal count".to_string()));
        }
        if self.repetitions == 0 {
            errs.push(("repetitions", "must be at least 1".to_string()));
        }
        if self.memory_tokens.contains(&0) {
            errs.push(("memory_tokens", "must be positive".to_string()));
        }
        errs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub median: f64,
    /// Median absolute deviation from the median.
    pub mad: f64,
    pub min: f64,
    pub max: f64,
    pub repetitions: usize,
    pub low_resolution: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    /// `per_focal` or `shared`.
    pub variant: String,
    pub focal_agents: usize,
    pub encoder: Timing,
    pub total: Timing,
    /// Attention weights plus gathered key/value rows of one full forward.
    pub attention_buffer_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryPoint {
    pub tokens: usize,
    pub neighbors: usize,
    pub local_values: usize,
    pub dense_values: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub entries: Vec<BenchEntry>,
    pub memory: Vec<MemoryPoint>,
}

impl BenchReport {
    pub fn entry(&self, variant: &str, focal_agents: usize) -> Option<&BenchEntry> {
        self.entries
            .iter()
            .find(|e| e.variant == variant && e.focal_agents == focal_agents)
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn summarize(mut samples: Vec<f64>, low_resolution: bool) -> Timing {
    samples.sort_by(f64::total_cmp);
    let med = median(&samples);
    let mut dev: Vec<f64> = samples.iter().map(|s| (s - med).abs()).collect();
    dev.sort_by(f64::total_cmp);
    Timing {
        median: med,
        mad: median(&dev),
        min: samples[0],
        max: samples[samples.len() - 1],
        repetitions: samples.len(),
        low_resolution,
    }
}

fn measure(reps: usize, warmup: usize, mut f: impl FnMut() -> Result<()>) -> Result<Timing> {
    for _ in 0..warmup {
        f()?;
    }
    let mut reps = reps;
    let mut flagged = false;
    loop {
        let mut samples = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t = Instant::now();
            f()?;
            samples.push(t.elapsed().as_secs_f64());
        }
        let timing = summarize(samples, flagged);
        if timing.median >= MIN_RESOLVABLE_SECONDS || flagged {
            return Ok(timing);
        }
        reps *= 4;
        flagged = true;
    }
}

/// Times the per-focal (MTR) and shared (MTR++) pipelines on one fixed
/// generated scene while the number of focal agents grows. Encoder latency
/// includes vectorization, which the per-focal variant repeats per agent.
pub fn benchmark_efficiency(model_cfg: &ModelConfig, cfg: &BenchConfig, seed: u64) -> Result<BenchReport> {
    if let Some((f, m)) = cfg.check().into_iter().next() {
        return Err(Error::Config(format!("bench.{f}: {m}")));
    }
    let max_focal = cfg.focal_counts.iter().copied().max().unwrap_or(1);
    let gen = GeneratorConfig {
        num_agents: cfg.num_agents,
        num_focal: max_focal,
        future_frames: model_cfg.future_frames,
        partial_history_probability: 0.0,
        ..GeneratorConfig::default()
    };
    let scene = generate_synthetic_scene(&gen, seed)?;
    let endpoints = collect_endpoints(std::slice::from_ref(&scene))?;
    let mut entries = Vec::new();
    for (variant, mode) in [("per_focal", ModelMode::Mtr), ("shared", ModelMode::MtrPlusPlus)] {
        let mc = ModelConfig {
            mode,
            ..model_cfg.clone()
        };
        let points = IntentionPoints::generate(&endpoints, mc.decoder.num_modes, seed)?;
        let mut store = ParameterStore::new(seed);
        let model = MotionModel::new(&mut store, &mc, points)?;
        for &count in &cfg.focal_counts {
            let ids = &scene.focal_ids[..count];
            let encoder = measure(cfg.repetitions, cfg.warmup, || {
                match mode {
                    ModelMode::Mtr => {
                        for &id in ids {
                            let v = vectorize_focal(&scene, id, &mc.vectorize)?;
                            let mut g = Graph::inference();
                            model.encoder().forward(&mut g, &store, &v)?;
                        }
                    }
                    ModelMode::MtrPlusPlus => {
                        let v = to_polyline_frames(&scene, &mc.vectorize)?;
                        let mut g = Graph::inference();
                        model.encoder().forward(&mut g, &store, &v)?;
                    }
                }
                Ok(())
            })?;
            let mut buffer = 0;
            let total = measure(cfg.repetitions, cfg.warmup, || {
                let mut g = Graph::inference();
                let out = model.forward_focal(&mut g, &store, &scene, ids)?;
                std::hint::black_box(collect_predictions(&g, &out));
                buffer = g.attention_stats().buffer_bytes();
                Ok(())
            })?;
            log::info!(
                "{variant} x{count}: encoder {:.3} ms, total {:.3} ms",
                encoder.median * 1e3,
                total.median * 1e3
            );
            entries.push(BenchEntry {
                variant: variant.to_string(),
                focal_agents: count,
                encoder,
                total,
                attention_buffer_bytes: buffer,
            });
        }
    }
    let memory = attention_memory_scaling(
        &cfg.memory_tokens,
        model_cfg.encoder.neighbors,
        model_cfg.encoder.hidden_dim,
        model_cfg.encoder.num_heads,
        seed,
    )?;
    Ok(BenchReport { entries, memory })
}

/// Attention buffer sizes of one self-attention layer over `n` random tokens,
/// with `neighbors`-nearest local neighborhoods and with full neighborhoods.
pub fn attention_memory_scaling(
    token_counts: &[usize],
    neighbors: usize,
    dim: usize,
    heads: usize,
    seed: u64,
) -> Result<Vec<MemoryPoint>> {
    let mut store = ParameterStore::new(seed);
    let mha = MultiHeadAttention::new(&mut store, "bench.attention", dim, dim, dim, dim, heads)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(token_counts.len());
    for &n in token_counts {
        let positions: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)])
            .collect();
        let features = Tensor::new(vec![n, dim], (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let run = |nb: &Neighborhoods| -> Result<usize> {
            let mut g = Graph::inference();
            let x = g.constant(features.clone());
            mha.forward_tokens(&mut g, &store, x, x, x, nb)?;
            Ok(g.attention_stats().buffer_values)
        };
        let local = Neighborhoods::from_lists(&knn_neighborhoods(&positions, neighbors));
        out.push(MemoryPoint {
            tokens: n,
            neighbors: neighbors.min(n),
            local_values: run(&local)?,
            dense_values: run(&Neighborhoods::full(n, n))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn memory_counters_scale_as_expected() {
        let pts = attention_memory_scaling(&[16, 32, 64], 4, 8, 2, 0).unwrap();
        // Per pair: one weight per head plus a key and a value row.
        for p in &pts {
            assert_eq!(p.local_values, p.tokens * 4 * (2 + 16));
            assert_eq!(p.dense_values, p.tokens * p.tokens * (2 + 16));
        }
    }

    #[test]
    fn median_and_mad() {
        let t = summarize(vec![3.0, 1.0, 2.0, 10.0], false);
        assert_eq!((t.median, t.mad, t.min, t.max), (2.5, 1.0, 1.0, 10.0));
    }

    #[test]
    fn config_checks() {
        let cfg = BenchConfig {
            focal_counts: vec![8, 40],
            ..BenchConfig::default()
        };
        assert_eq!(cfg.check().len(), 1);
    }
}
