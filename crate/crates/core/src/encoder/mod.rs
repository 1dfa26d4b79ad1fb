//! Context encoders.
//!
//! Both variants turn agent and map polylines into one token per polyline and
//! refine the tokens with local self-attention over k-nearest neighbors.
//! The focal-centric encoder works in one focal agent's frame and adds
//! absolute positional encodings. The symmetric encoder keeps every token in
//! its own frame and encodes pairwise relative poses instead, which makes its
//! output independent of the world frame.

mod dense;
mod polyline;

use serde::{Deserialize, Serialize};

pub use dense::DenseFuturePredictor;
pub use polyline::PolylineEncoder;

use crate::error::{Error, Result};
use crate::numerics::encoding::{check_relative_pe_dim, relative_pose_pe, sinusoidal_pe};
use crate::numerics::{FeedForward, Graph, LayerNorm, MultiHeadAttention, Neighborhoods, ParameterStore, Tensor, Var};
use crate::scene::{knn_neighborhoods, relative_pose, Pose, VectorizedScene};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    FocalCentric,
    Symmetric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub neighbors: usize,
    /// Hidden widths of the per-point MLP; the output width is `hidden_dim`.
    pub polyline_layers: Vec<usize>,
    pub dense_future: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            hidden_dim: 32,
            num_heads: 2,
            neighbors: 8,
            polyline_layers: vec![32],
            dense_future: true,
        }
    }
}

impl EncoderConfig {
    /// Returns `(field, message)` pairs for every violated invariant.
    pub fn check(&self) -> Vec<(&'static str, String)> {
        let mut errs = Vec::new();
        if self.num_layers == 0 {
            errs.push(("num_layers", "must be at least 1".to_string()));
        }
        if self.num_heads == 0 {
            errs.push(("num_heads", "must be at least 1".to_string()));
        } else if self.hidden_dim % self.num_heads != 0 {
            errs.push((
                "hidden_dim",
                format!(
                    "hidden_dim ({}) must be divisible by num_heads ({})",
                    self.hidden_dim, self.num_heads
                ),
            ));
        }
        if self.hidden_dim == 0 || self.hidden_dim % 4 != 0 || check_relative_pe_dim(self.hidden_dim).is_err() {
            errs.push(("hidden_dim", format!("must be a positive multiple of 4 and at least 8, got {}", self.hidden_dim)));
        }
        if self.neighbors == 0 {
            errs.push(("neighbors", "must be at least 1".to_string()));
        }
        if self.polyline_layers.contains(&0) {
            errs.push(("polyline_layers", "widths must be positive".to_string()));
        }
        errs
    }
}

/// Encoder output for one vectorized scene.
#[derive(Clone, Debug)]
pub struct EncodedScene {
    /// `[N_a, D]`, after dense-future enhancement when enabled.
    pub agents: Var,
    /// `[N_m, D]`.
    pub map: Var,
    /// `[N_a, T_f · 4]` of `(x, y, vx, vy)` per step, in the frame of the
    /// agent features.
    pub dense_future: Option<Var>,
    pub agent_valid: Vec<bool>,
    pub map_valid: Vec<bool>,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

impl Block {
    fn new(store: &mut ParameterStore, name: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), 2 * d, 2 * d, d, d, heads)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d)?,
        })
    }

    fn finish(&self, g: &mut Graph, store: &ParameterStore, x: Var, a: Var) -> Result<Var> {
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, store, x)?;
        let f = self.ffn.forward(g, store, h)?;
        g.add(x, f)
    }

    /// Query and key carry `[LN(x), PE(position)]`, the value carries `LN(x)`.
    fn forward_focal(&self, g: &mut Graph, store: &ParameterStore, x: Var, pe: Var, nb: &Neighborhoods) -> Result<Var> {
        let h = self.ln1.forward(g, store, x)?;
        let qk = g.concat_cols(&[h, pe])?;
        let a = self.attn.forward_tokens(g, store, qk, qk, h, nb)?;
        self.finish(g, store, x, a)
    }

    /// Query `[h_i, PE(R_ii)]`, key `[h_j, PE(R_ij)]`, value `h_j + PE(R_ij)`.
    fn forward_symmetric(&self, g: &mut Graph, store: &ParameterStore, x: Var, rel: &RelativeEncoding) -> Result<Var> {
        let h = self.ln1.forward(g, store, x)?;
        let q = g.concat_cols(&[h, rel.self_pe])?;
        let hj = g.gather_rows(h, rel.neighborhoods.indices())?;
        let k = g.concat_cols(&[hj, rel.pair_pe])?;
        let v = g.add(hj, rel.pair_pe)?;
        let a = self.attn.forward_pairs(g, store, q, k, v, rel.neighborhoods.offsets())?;
        self.finish(g, store, x, a)
    }
}

/// Relative-pose encodings for every `(i, j ∈ Ω(i))` pair, shared by all layers.
pub struct RelativeEncoding {
    pub neighborhoods: Neighborhoods,
    pub self_pe: Var,
    pub pair_pe: Var,
}

impl RelativeEncoding {
    pub fn new(g: &mut Graph, poses: &[Pose], neighborhoods: Neighborhoods, dim: usize) -> Result<Self> {
        let mut rel = Vec::with_capacity(neighborhoods.num_pairs());
        for (i, list) in neighborhoods.iter().enumerate() {
            for &j in list {
                let (p, a) = relative_pose(&poses[i], &poses[j]);
                rel.push([p[0], p[1], a]);
            }
        }
        let pair = relative_pose_pe(&rel, dim)?;
        let one = relative_pose_pe(&[[0.0, 0.0, 0.0]], dim)?;
        let selfs = Tensor::new(
            vec![poses.len(), dim],
            one.data().iter().copied().cycle().take(poses.len() * dim).collect(),
        )?;
        Ok(Self {
            neighborhoods,
            self_pe: g.constant(selfs),
            pair_pe: g.constant(pair),
        })
    }
}

#[derive(Clone, Debug)]
pub struct ContextEncoder {
    cfg: EncoderConfig,
    mode: EncoderMode,
    agent_encoder: PolylineEncoder,
    map_encoder: PolylineEncoder,
    blocks: Vec<Block>,
    dense: Option<DenseFuturePredictor>,
}

impl ContextEncoder {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        cfg: &EncoderConfig,
        mode: EncoderMode,
        agent_channels: usize,
        map_channels: usize,
        future_frames: usize,
    ) -> Result<Self> {
        if let Some((field, msg)) = cfg.check().into_iter().find(|(f, _)| *f != "num_layers") {
            return Err(Error::Config(format!("encoder.{field}: {msg}")));
        }
        let d = cfg.hidden_dim;
        let dims = |c: usize| {
            let mut v = vec![c];
            v.extend(&cfg.polyline_layers);
            v.push(d);
            v
        };
        let blocks = (0..cfg.num_layers)
            .map(|i| Block::new(store, &format!("{name}.layer{i}"), d, cfg.num_heads))
            .collect::<Result<Vec<_>>>()?;
        let dense = if cfg.dense_future {
            Some(DenseFuturePredictor::new(store, &format!("{name}.dense"), d, &cfg.polyline_layers, future_frames)?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            mode,
            agent_encoder: PolylineEncoder::new(store, &format!("{name}.agent_polyline"), &dims(agent_channels))?,
            map_encoder: PolylineEncoder::new(store, &format!("{name}.map_polyline"), &dims(map_channels))?,
            blocks,
            dense,
        })
    }

    pub fn mode(&self) -> EncoderMode {
        self.mode
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Polyline features concatenated as `[N_a + N_m, D]` tokens.
    pub fn tokens(&self, g: &mut Graph, store: &ParameterStore, v: &VectorizedScene) -> Result<(Var, Vec<bool>, Vec<bool>)> {
        let (a, av) = self.agent_encoder.forward(g, store, &v.agents.features, &v.agents.mask)?;
        if v.map.count() == 0 {
            return Ok((a, av, Vec::new()));
        }
        let (m, mv) = self.map_encoder.forward(g, store, &v.map.features, &v.map.mask)?;
        let t = g.concat_rows(&[a, m])?;
        Ok((t, av, mv))
    }

    /// Runs the attention stack on given tokens with explicit neighborhoods.
    pub fn attend(&self, g: &mut Graph, store: &ParameterStore, tokens: Var, poses: &[Pose], nb: Neighborhoods) -> Result<Var> {
        let d = self.cfg.hidden_dim;
        let mut x = tokens;
        match self.mode {
            EncoderMode::FocalCentric => {
                let coords: Vec<f64> = poses.iter().flat_map(|p| p.position).collect();
                let pe = sinusoidal_pe(&Tensor::new(vec![poses.len(), 2], coords)?, d)?;
                let pe = g.constant(pe);
                for b in &self.blocks {
                    x = b.forward_focal(g, store, x, pe, &nb)?;
                }
            }
            EncoderMode::Symmetric => {
                let rel = RelativeEncoding::new(g, poses, nb, d)?;
                for b in &self.blocks {
                    x = b.forward_symmetric(g, store, x, &rel)?;
                }
            }
        }
        Ok(x)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, v: &VectorizedScene) -> Result<EncodedScene> {
        let (tokens, agent_valid, map_valid) = self.tokens(g, store, v)?;
        let poses = v.token_poses();
        let positions: Vec<[f64; 2]> = poses.iter().map(|p| p.position).collect();
        let nb = Neighborhoods::from_lists(&knn_neighborhoods(&positions, self.cfg.neighbors));
        let x = self.attend(g, store, tokens, &poses, nb)?;
        let na = v.agent_poses.len();
        let agents = g.gather_rows(x, &(0..na).collect::<Vec<_>>())?;
        let map = g.gather_rows(x, &(na..poses.len()).collect::<Vec<_>>())?;
        let (agents, dense_future) = match &self.dense {
            Some(d) => {
                let (s, f) = d.forward(g, store, agents)?;
                (f, Some(s))
            }
            None => (agents, None),
        };
        Ok(EncodedScene {
            agents,
            map,
            dense_future,
            agent_valid,
            map_valid,
        })
    }
}
