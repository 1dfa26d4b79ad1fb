//! The full predictor: vectorization, context encoder and decoder head.
//!
//! In [`ModelMode::Mtr`] every focal agent gets its own focal-centric pass of
//! the whole pipeline. In [`ModelMode::MtrPlusPlus`] the scene is encoded
//! once with the symmetric encoder and all focal agents are decoded together.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::decoder::{
    Decoder, DecoderConfig, DecoderInput, DecoderOutput, FocalQuery, IntentionPoints, MlpHead, QueryAttention,
    TrajectoryDistribution,
};
use crate::encoder::{ContextEncoder, EncodedScene, EncoderConfig, EncoderMode};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParameterStore};
use crate::scene::{future_targets, to_polyline_frames, vectorize_focal, Pose, Scene, VectorizeConfig, VectorizedScene};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelMode {
    #[serde(rename = "mtr")]
    Mtr,
    #[serde(rename = "mtr++")]
    MtrPlusPlus,
}

impl ModelMode {
    pub fn encoder_mode(self) -> EncoderMode {
        match self {
            ModelMode::Mtr => EncoderMode::FocalCentric,
            ModelMode::MtrPlusPlus => EncoderMode::Symmetric,
        }
    }

    pub fn query_attention(self) -> QueryAttention {
        match self {
            ModelMode::Mtr => QueryAttention::PerAgent,
            ModelMode::MtrPlusPlus => QueryAttention::MutuallyGuided,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// `K` intention queries with GMM outputs.
    IntentionQuery,
    /// One trajectory regressed from the focal agent feature.
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub mode: ModelMode,
    pub head: HeadKind,
    /// Predicted future frames `T_f`.
    pub future_frames: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub vectorize: VectorizeConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: ModelMode::MtrPlusPlus,
            head: HeadKind::IntentionQuery,
            future_frames: 20,
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            vectorize: VectorizeConfig::default(),
        }
    }
}

impl ModelConfig {
    /// `(dotted field path, message)` for every violated invariant.
    pub fn check(&self) -> Vec<(String, String)> {
        let mut errs: Vec<(String, String)> = self
            .encoder
            .check()
            .into_iter()
            .map(|(f, m)| (format!("encoder.{f}"), m))
            .collect();
        errs.extend(
            self.decoder
                .check(self.encoder.hidden_dim)
                .into_iter()
                .map(|(f, m)| (format!("decoder.{f}"), m)),
        );
        if self.future_frames == 0 {
            errs.push(("future_frames".into(), "must be at least 1".into()));
        }
        if self.vectorize.points_per_polyline < 2 {
            errs.push(("vectorize.points_per_polyline".into(), "must be at least 2".into()));
        }
        if self.vectorize.categories.is_empty() {
            errs.push(("vectorize.categories".into(), "needs at least one category".into()));
        }
        errs
    }

    /// Modes per focal agent actually produced by the head.
    pub fn output_modes(&self) -> usize {
        match self.head {
            HeadKind::IntentionQuery => self.decoder.num_modes,
            HeadKind::Mlp => 1,
        }
    }
}

/// One decoding pass: the vectorized input, its encoding and the decoder
/// outputs for the focal agents listed.
#[derive(Clone, Debug)]
pub struct DecodedGroup {
    pub vectorized: VectorizedScene,
    pub encoded: EncodedScene,
    pub output: DecoderOutput,
    pub focal_ids: Vec<u64>,
    pub focal_categories: Vec<String>,
    /// World pose of each focal agent; predictions live in this frame.
    pub focal_frames: Vec<Pose>,
    /// Static intention points of each focal agent.
    pub focal_points: Vec<Vec<[f64; 2]>>,
    /// World frame of each agent row's dense-future features.
    pub agent_frames: Vec<Pose>,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub groups: Vec<DecodedGroup>,
}

/// A focal agent's mixture in its own frame, plus that frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalPrediction {
    pub agent_id: u64,
    pub category: String,
    pub frame: Pose,
    pub distribution: TrajectoryDistribution,
}

#[derive(Clone, Debug)]
pub struct MotionModel {
    cfg: ModelConfig,
    encoder: ContextEncoder,
    decoder: Option<Decoder>,
    mlp: Option<MlpHead>,
    intention: IntentionPoints,
}

impl MotionModel {
    /// Registers all parameters in `store`.
    pub fn new(store: &mut ParameterStore, cfg: &ModelConfig, intention: IntentionPoints) -> Result<Self> {
        if let Some((field, msg)) = cfg.check().into_iter().next() {
            return Err(Error::Config(format!("model.{field}: {msg}")));
        }
        let d = cfg.encoder.hidden_dim;
        let encoder = ContextEncoder::new(
            store,
            "encoder",
            &cfg.encoder,
            cfg.mode.encoder_mode(),
            cfg.vectorize.agent_channels(),
            cfg.vectorize.map_channels(),
            cfg.future_frames,
        )?;
        let (decoder, mlp) = match cfg.head {
            HeadKind::IntentionQuery => {
                if intention.k != cfg.decoder.num_modes {
                    return Err(Error::Config(format!(
                        "intention points were clustered with K = {} but the decoder uses K = {}",
                        intention.k, cfg.decoder.num_modes
                    )));
                }
                let dec = Decoder::new(store, "decoder", &cfg.decoder, cfg.mode.query_attention(), d, cfg.future_frames)?;
                (Some(dec), None)
            }
            HeadKind::Mlp => (None, Some(MlpHead::new(store, "mlp_head", d, cfg.future_frames)?)),
        };
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            decoder,
            mlp,
            intention,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn intention_points(&self) -> &IntentionPoints {
        &self.intention
    }

    pub fn encoder(&self) -> &ContextEncoder {
        &self.encoder
    }

    fn points_for(&self, category: &str) -> Result<Vec<[f64; 2]>> {
        match self.cfg.head {
            HeadKind::IntentionQuery => Ok(self.intention.for_category(category)?.to_vec()),
            HeadKind::Mlp => Ok(vec![[0.0, 0.0]]),
        }
    }

    fn decode(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        scene: &Scene,
        v: VectorizedScene,
        focal_ids: &[u64],
    ) -> Result<DecodedGroup> {
        let encoded = self.encoder.forward(g, store, &v)?;
        let mut focal = Vec::with_capacity(focal_ids.len());
        let mut categories = Vec::with_capacity(focal_ids.len());
        let mut frames = Vec::with_capacity(focal_ids.len());
        for &id in focal_ids {
            let row = v.agent_row(id)?;
            let category = scene.agent(id)?.category.clone();
            let pose = v.agent_poses[row];
            frames.push(match v.frame {
                Some(f) => f,
                None => pose,
            });
            focal.push(FocalQuery {
                row,
                pose,
                points: self.points_for(&category)?,
            });
            categories.push(category);
        }
        let input = DecoderInput {
            agents: encoded.agents,
            map: encoded.map,
            agent_poses: &v.agent_poses,
            map_poses: &v.map_poses,
            agent_valid: &encoded.agent_valid,
            map_valid: &encoded.map_valid,
            focal: &focal,
        };
        let output = match (&self.decoder, &self.mlp) {
            (Some(d), _) => d.forward(g, store, &input)?,
            (None, Some(m)) => m.forward(g, store, &input)?,
            (None, None) => unreachable!("model has a head"),
        };
        let agent_frames = match v.frame {
            Some(f) => vec![f; v.agent_poses.len()],
            None => v.agent_poses.clone(),
        };
        Ok(DecodedGroup {
            focal_points: focal.into_iter().map(|f| f.points).collect(),
            vectorized: v,
            encoded,
            output,
            focal_ids: focal_ids.to_vec(),
            focal_categories: categories,
            focal_frames: frames,
            agent_frames,
        })
    }

    /// Runs the pipeline on every focal agent of `scene`.
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, scene: &Scene) -> Result<ModelOutput> {
        self.forward_focal(g, store, scene, &scene.focal_ids)
    }

    /// Runs the pipeline on the listed focal agents. In the shared-encoder
    /// mode map selection still follows the scene's own focal list.
    pub fn forward_focal(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        scene: &Scene,
        focal_ids: &[u64],
    ) -> Result<ModelOutput> {
        if focal_ids.is_empty() {
            return Err(Error::invalid(format!("scene {} has no focal agents", scene.id)));
        }
        let groups = match self.cfg.mode {
            ModelMode::Mtr => focal_ids
                .iter()
                .map(|&id| {
                    let v = vectorize_focal(scene, id, &self.cfg.vectorize)?;
                    self.decode(g, store, scene, v, &[id])
                })
                .collect::<Result<Vec<_>>>()?,
            ModelMode::MtrPlusPlus => {
                let v = to_polyline_frames(scene, &self.cfg.vectorize)?;
                vec![self.decode(g, store, scene, v, focal_ids)?]
            }
        };
        Ok(ModelOutput { groups })
    }

    /// Final-layer mixtures of every focal agent, in scene focal order.
    pub fn predict(&self, store: &ParameterStore, scene: &Scene) -> Result<Vec<FocalPrediction>> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, store, scene)?;
        Ok(collect_predictions(&g, &out))
    }
}

/// Final-layer mixtures of every decoded focal agent.
pub fn collect_predictions(g: &Graph, out: &ModelOutput) -> Vec<FocalPrediction> {
    let mut preds = Vec::new();
    for grp in &out.groups {
        let last = grp.output.layers.len() - 1;
        for (t, &id) in grp.focal_ids.iter().enumerate() {
            preds.push(FocalPrediction {
                agent_id: id,
                category: grp.focal_categories[t].clone(),
                frame: grp.focal_frames[t],
                distribution: grp.output.distribution(g, last, t),
            });
        }
    }
    preds
}

/// Ground-truth endpoints of focal agents in their own frames, grouped by
/// category. Agents without a valid final future frame are skipped.
pub fn collect_endpoints(scenes: &[Scene]) -> Result<BTreeMap<String, Vec<[f64; 2]>>> {
    let mut out: BTreeMap<String, Vec<[f64; 2]>> = BTreeMap::new();
    for s in scenes {
        for &id in &s.focal_ids {
            let a = s.agent(id)?;
            let (Some(pose), Some(end)) = (a.current_pose(), a.future.last()) else {
                continue;
            };
            if !end.valid {
                continue;
            }
            out.entry(a.category.clone()).or_default().push(pose.to_local([end.x, end.y]));
        }
    }
    Ok(out)
}

/// Local-frame future targets `[N_a, T_f, 4]` for a group's agent rows.
pub fn dense_targets(scene: &Scene, group: &DecodedGroup) -> Result<(crate::numerics::Tensor, Vec<bool>)> {
    future_targets(scene, &group.vectorized.agent_ids, &group.agent_frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_dataset, transform_scene, GeneratorConfig};

    fn small() -> (ModelConfig, Vec<Scene>) {
        let gen = GeneratorConfig {
            num_agents: 5,
            num_focal: 2,
            history_frames: 5,
            future_frames: 6,
            ..GeneratorConfig::default()
        };
        let scenes = generate_dataset(&gen, 3, 12).unwrap();
        let mut cfg = ModelConfig {
            future_frames: 6,
            ..ModelConfig::default()
        };
        cfg.encoder.hidden_dim = 16;
        cfg.decoder.num_modes = 4;
        cfg.vectorize.max_map_polylines = 16;
        cfg.vectorize.points_per_polyline = 6;
        (cfg, scenes)
    }

    fn build(cfg: &ModelConfig, scenes: &[Scene]) -> (ParameterStore, MotionModel) {
        let ends = collect_endpoints(scenes).unwrap();
        let ip = IntentionPoints::generate(&ends, cfg.decoder.num_modes, 0).unwrap();
        let mut store = ParameterStore::new(1);
        let m = MotionModel::new(&mut store, cfg, ip).unwrap();
        (store, m)
    }

    #[test]
    fn both_modes_predict_valid_mixtures() {
        let (mut cfg, scenes) = small();
        for mode in [ModelMode::Mtr, ModelMode::MtrPlusPlus] {
            cfg.mode = mode;
            let (store, m) = build(&cfg, &scenes);
            let preds = m.predict(&store, &scenes[0]).unwrap();
            assert_eq!(preds.len(), 2);
            for p in preds {
                p.distribution.validate().unwrap();
                assert_eq!(p.distribution.num_modes(), 4);
                assert_eq!(p.distribution.horizon(), 6);
            }
        }
    }

    #[test]
    fn shared_encoder_predictions_ignore_world_frame() {
        let (cfg, scenes) = small();
        let (store, m) = build(&cfg, &scenes);
        let a = m.predict(&store, &scenes[1]).unwrap();
        let b = m.predict(&store, &transform_scene(&scenes[1], &Pose::new([31.0, -12.0], 2.2))).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for (mx, my) in x.distribution.modes.iter().zip(&y.distribution.modes) {
                for (s, t) in mx.iter().zip(my) {
                    assert!((s.mu_x - t.mu_x).abs() < 1e-6 && (s.mu_y - t.mu_y).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn mismatched_intention_k_rejected() {
        let (cfg, scenes) = small();
        let ends = collect_endpoints(&scenes).unwrap();
        let ip = IntentionPoints::generate(&ends, 3, 0).unwrap();
        assert!(MotionModel::new(&mut ParameterStore::new(0), &cfg, ip).is_err());
    }

    #[test]
    fn mlp_head_outputs_one_mode() {
        let (mut cfg, scenes) = small();
        cfg.head = HeadKind::Mlp;
        let (store, m) = build(&cfg, &scenes);
        let preds = m.predict(&store, &scenes[2]).unwrap();
        assert!(preds.iter().all(|p| p.distribution.num_modes() == 1));
    }
}
