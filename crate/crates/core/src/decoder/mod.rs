//! Intention-query decoder.
//!
//! Every focal agent gets `K` queries anchored at static intention points.
//! Each layer runs query self-attention, cross-attention to the agent tokens
//! and a dynamically collected subset of map tokens, a feed-forward update and
//! the mode-probability and GMM heads. Layer outputs feed the next layer and
//! all of them are returned for deep supervision.

mod collect;
mod gmm;
mod intention;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use collect::{collect_map_tokens, CollectionPath};
pub use gmm::{gmm_density, integrate_density, GaussianStep, TrajectoryDistribution, RHO_LIMIT, SIGMA_FLOOR};
pub use intention::{globalize_intention_points, kmeans, IntentionPoints};

use crate::encoder::RelativeEncoding;
use crate::error::{Error, Result};
use crate::numerics::encoding::sinusoidal_pe;
use crate::numerics::{
    Activation, FeedForward, Graph, LayerNorm, Linear, Mlp, MultiHeadAttention, Neighborhoods, ParameterStore, Tensor,
    Var,
};
use crate::scene::{knn_between, Pose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub num_layers: usize,
    /// `K`, queries per focal agent.
    pub num_modes: usize,
    /// Map tokens collected per query.
    pub map_collect: usize,
    pub num_heads: usize,
    /// Neighborhood size of the mutually-guided query attention.
    pub query_neighbors: usize,
    /// Lets queries of different focal agents attend to each other.
    pub cross_agent: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_modes: 8,
            map_collect: 16,
            num_heads: 2,
            query_neighbors: 16,
            cross_agent: true,
        }
    }
}

impl DecoderConfig {
    /// Returns `(field, message)` pairs for every violated invariant, given
    /// the shared hidden width.
    pub fn check(&self, hidden_dim: usize) -> Vec<(&'static str, String)> {
        let mut errs = Vec::new();
        if self.num_layers == 0 {
            errs.push(("num_layers", "must be at least 1".to_string()));
        }
        if self.num_modes == 0 {
            errs.push(("num_modes", "K must be at least 1 (a decoder needs one query per mode)".to_string()));
        }
        if self.map_collect == 0 {
            errs.push(("map_collect", "must be at least 1".to_string()));
        }
        if self.num_heads == 0 {
            errs.push(("num_heads", "must be at least 1".to_string()));
        } else if hidden_dim % self.num_heads != 0 {
            errs.push((
                "num_heads",
                format!("hidden_dim ({hidden_dim}) must be divisible by decoder num_heads ({})", self.num_heads),
            ));
        }
        if self.query_neighbors == 0 {
            errs.push(("query_neighbors", "must be at least 1".to_string()));
        }
        errs
    }
}

/// How queries exchange information before cross-attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryAttention {
    /// Full attention among one agent's `K` queries with `F + E` as query and
    /// key and `F` as value.
    PerAgent,
    /// Query-centric attention over kNN neighborhoods of globalized query
    /// poses with relative-pose encodings.
    MutuallyGuided,
}

/// One focal agent to decode.
#[derive(Clone, Debug)]
pub struct FocalQuery {
    /// Row of the agent among the agent tokens.
    pub row: usize,
    /// Agent pose in the frame of the token poses.
    pub pose: Pose,
    /// Static intention points in the agent's local frame.
    pub points: Vec<[f64; 2]>,
}

/// Encoded context plus the focal agents to decode.
#[derive(Clone, Debug)]
pub struct DecoderInput<'a> {
    /// `[N_a, D]`.
    pub agents: Var,
    /// `[N_m, D]`.
    pub map: Var,
    pub agent_poses: &'a [Pose],
    pub map_poses: &'a [Pose],
    pub agent_valid: &'a [bool],
    pub map_valid: &'a [bool],
    pub focal: &'a [FocalQuery],
}

/// Raw head outputs of one layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    /// `[N_o, K]` log mode probabilities.
    pub log_probs: Var,
    /// `[N_o · K, T · 5]` channel-major `(μx, μy, σx_raw, σy_raw, ρ_raw)`.
    pub trajectories: Var,
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub layers: Vec<LayerOutput>,
    pub num_focal: usize,
    pub num_modes: usize,
    pub horizon: usize,
}

impl DecoderOutput {
    pub fn last(&self) -> &LayerOutput {
        self.layers.last().expect("decoder output has at least one layer")
    }

    /// Mixture of focal agent `t` at `layer`, in the agent's local frame.
    pub fn distribution(&self, g: &Graph, layer: usize, t: usize) -> TrajectoryDistribution {
        let out = &self.layers[layer];
        let lp = g.value(out.log_probs);
        let traj = g.value(out.trajectories);
        let k = self.num_modes;
        let h = self.horizon;
        let probs: Vec<f64> = lp.row(t).iter().map(|v| v.exp()).collect();
        let total: f64 = probs.iter().sum();
        let probs = probs.into_iter().map(|p| p / total).collect();
        let modes = (0..k)
            .map(|m| {
                let r = traj.row(t * k + m);
                (0..h)
                    .map(|s| GaussianStep::from_raw(r[s], r[h + s], r[2 * h + s], r[3 * h + s], r[4 * h + s]))
                    .collect()
            })
            .collect();
        TrajectoryDistribution { probs, modes }
    }

    /// Mean waypoints of every query at `layer`.
    pub fn mean_waypoints(&self, g: &Graph, layer: usize) -> Vec<Vec<[f64; 2]>> {
        let traj = g.value(self.layers[layer].trajectories);
        let h = self.horizon;
        (0..traj.rows())
            .map(|q| {
                let r = traj.row(q);
                (0..h).map(|s| [r[s], r[h + s]]).collect()
            })
            .collect()
    }
}

/// Cross-attention with `[content, position]` keys. The content and position
/// halves of the key projection are applied before pairs are materialized,
/// which equals projecting each concatenated pair.
#[derive(Clone, Debug)]
struct CrossAttention {
    q: Linear,
    k_content: Linear,
    k_pos: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

struct CrossPairs {
    tokens: Vec<usize>,
    table: Vec<usize>,
    offsets: Arc<Vec<usize>>,
}

impl CrossAttention {
    fn new(store: &mut ParameterStore, name: &str, d: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), 2 * d, d, true)?,
            k_content: Linear::new(store, &format!("{name}.k_content"), d, d, false)?,
            k_pos: Linear::new(store, &format!("{name}.k_pos"), d, d, true)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, true)?,
            out: Linear::new(store, &format!("{name}.out"), d, d, true)?,
            heads,
        })
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        xq: Var,
        tokens: Var,
        pe_table: Var,
        pairs: &CrossPairs,
    ) -> Result<Var> {
        let q = self.q.forward(g, store, xq)?;
        let kc = self.k_content.forward(g, store, tokens)?;
        let kp = self.k_pos.forward(g, store, pe_table)?;
        let kc = g.gather_rows(kc, &pairs.tokens)?;
        let kp = g.gather_rows(kp, &pairs.table)?;
        let k = g.add(kc, kp)?;
        let v = self.v.forward(g, store, tokens)?;
        let v = g.gather_rows(v, &pairs.tokens)?;
        let a = g.attention(q, k, v, Arc::clone(&pairs.offsets), self.heads)?;
        self.out.forward(g, store, a)
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    cross_attn: CrossAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
    ln_head: LayerNorm,
    cls: Mlp,
    reg: Mlp,
}

/// Per-decode constants shared by all layers.
struct Context {
    tokens: Var,
    pe_table: Var,
    num_agents: usize,
    num_tokens: usize,
    agent_keys: Vec<usize>,
    /// Map centers in each focal agent's frame.
    local_map: Vec<Vec<[f64; 2]>>,
    map_valid: Vec<bool>,
    self_nb: Neighborhoods,
    self_rel: Option<RelativeEncoding>,
}

impl DecoderLayer {
    fn new(
        store: &mut ParameterStore,
        name: &str,
        d: usize,
        heads: usize,
        qa: QueryAttention,
        horizon: usize,
    ) -> Result<Self> {
        let (q_in, k_in) = match qa {
            QueryAttention::PerAgent => (d, d),
            QueryAttention::MutuallyGuided => (2 * d, 2 * d),
        };
        Ok(Self {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), d)?,
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), q_in, k_in, d, d, heads)?,
            ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), d)?,
            cross_attn: CrossAttention::new(store, &format!("{name}.cross_attn"), d, heads)?,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d)?,
            ln_head: LayerNorm::new(store, &format!("{name}.ln_head"), d)?,
            cls: Mlp::new(store, &format!("{name}.cls"), &[d, d, 1], Activation::Relu)?,
            reg: Mlp::new(store, &format!("{name}.reg"), &[d, d, horizon * 5], Activation::Relu)?,
        })
    }

    fn self_attention(&self, g: &mut Graph, store: &ParameterStore, ctx: &Context, f: Var, e: Var) -> Result<Var> {
        let h = self.ln_self.forward(g, store, f)?;
        match &ctx.self_rel {
            None => {
                let qk = g.add(h, e)?;
                self.self_attn.forward_tokens(g, store, qk, qk, h, &ctx.self_nb)
            }
            Some(rel) => {
                let he = g.add(h, e)?;
                let q = g.concat_cols(&[he, rel.self_pe])?;
                let hj = g.gather_rows(he, rel.neighborhoods.indices())?;
                let k = g.concat_cols(&[hj, rel.pair_pe])?;
                let v = g.add(hj, rel.pair_pe)?;
                self.self_attn.forward_pairs(g, store, q, k, v, rel.neighborhoods.offsets())
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        ctx: &Context,
        f: Var,
        e: Var,
        pairs: &CrossPairs,
        num_focal: usize,
        k: usize,
    ) -> Result<(Var, LayerOutput)> {
        let a = self.self_attention(g, store, ctx, f, e)?;
        let f = g.add(f, a)?;
        let h = self.ln_cross.forward(g, store, f)?;
        let q = g.concat_cols(&[h, e])?;
        let a = self.cross_attn.forward(g, store, q, ctx.tokens, ctx.pe_table, pairs)?;
        let f = g.add(f, a)?;
        let h = self.ln_ffn.forward(g, store, f)?;
        let u = self.ffn.forward(g, store, h)?;
        let f = g.add(f, u)?;
        let h = self.ln_head.forward(g, store, f)?;
        let logits = self.cls.forward(g, store, h)?;
        let logits = g.reshape(logits, &[num_focal, k])?;
        let log_probs = g.log_softmax_rows(logits)?;
        let trajectories = self.reg.forward(g, store, h)?;
        Ok((f, LayerOutput { log_probs, trajectories }))
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    cfg: DecoderConfig,
    query_attention: QueryAttention,
    hidden_dim: usize,
    horizon: usize,
    embed: Mlp,
    layers: Vec<DecoderLayer>,
}

impl Decoder {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        cfg: &DecoderConfig,
        query_attention: QueryAttention,
        hidden_dim: usize,
        horizon: usize,
    ) -> Result<Self> {
        if let Some((field, msg)) = cfg.check(hidden_dim).into_iter().next() {
            return Err(Error::Config(format!("decoder.{field}: {msg}")));
        }
        if horizon == 0 {
            return Err(Error::Config("decoder horizon must be at least 1".into()));
        }
        let d = hidden_dim;
        let layers = (0..cfg.num_layers)
            .map(|i| DecoderLayer::new(store, &format!("{name}.layer{i}"), d, cfg.num_heads, query_attention, horizon))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            query_attention,
            hidden_dim,
            horizon,
            embed: Mlp::new(store, &format!("{name}.query_embed"), &[d, d, d], Activation::Relu)?,
            layers,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn query_attention(&self) -> QueryAttention {
        self.query_attention
    }

    /// `E_I = MLP(PE(point))` for local intention points, `[n, D]`.
    pub fn query_embeddings(&self, g: &mut Graph, store: &ParameterStore, points: &[[f64; 2]]) -> Result<Var> {
        let coords = Tensor::new(vec![points.len(), 2], points.iter().flatten().copied().collect())?;
        let pe = g.constant(sinusoidal_pe(&coords, self.hidden_dim)?);
        self.embed.forward(g, store, pe)
    }

    /// Query neighborhoods for the mutually-guided attention: kNN over the
    /// globalized query positions, restricted to each agent's own queries
    /// unless cross-agent interaction is enabled.
    pub fn query_neighborhoods(&self, query_poses: &[Pose], num_focal: usize) -> Neighborhoods {
        let k = self.cfg.num_modes;
        let pos: Vec<[f64; 2]> = query_poses.iter().map(|p| p.position).collect();
        if self.cfg.cross_agent {
            return Neighborhoods::from_lists(&knn_between(&pos, &pos, self.cfg.query_neighbors));
        }
        let mut lists = Vec::with_capacity(pos.len());
        for t in 0..num_focal {
            let own = &pos[t * k..(t + 1) * k];
            for l in knn_between(own, own, self.cfg.query_neighbors) {
                lists.push(l.into_iter().map(|j| t * k + j).collect());
            }
        }
        Neighborhoods::from_lists(&lists)
    }

    fn context(&self, g: &mut Graph, input: &DecoderInput<'_>) -> Result<Context> {
        let k = self.cfg.num_modes;
        let na = input.agent_poses.len();
        let nm = input.map_poses.len();
        if g.shape(input.agents)[0] != na || g.shape(input.map)[0] != nm {
            return Err(Error::shape("decode", "token rows do not match token poses"));
        }
        let tokens = if nm == 0 { input.agents } else { g.concat_rows(&[input.agents, input.map])? };
        let positions: Vec<[f64; 2]> =
            input.agent_poses.iter().chain(input.map_poses).map(|p| p.position).collect();
        let mut coords = Vec::with_capacity(input.focal.len() * positions.len() * 2);
        let mut local_map = Vec::with_capacity(input.focal.len());
        for fq in input.focal {
            if fq.points.len() != k {
                return Err(Error::invalid(format!("{} intention points for K = {k}", fq.points.len())));
            }
            for &p in &positions {
                coords.extend(fq.pose.to_local(p));
            }
            local_map.push(input.map_poses.iter().map(|m| fq.pose.to_local(m.position)).collect());
        }
        let table = sinusoidal_pe(&Tensor::new(vec![coords.len() / 2, 2], coords)?, self.hidden_dim)?;
        let pe_table = g.constant(table);

        let nf = input.focal.len();
        let (self_nb, self_rel) = match self.query_attention {
            QueryAttention::PerAgent => {
                let lists: Vec<Vec<usize>> =
                    (0..nf * k).map(|q| ((q / k) * k..(q / k + 1) * k).collect()).collect();
                (Neighborhoods::from_lists(&lists), None)
            }
            QueryAttention::MutuallyGuided => {
                let poses: Vec<Pose> =
                    input.focal.iter().flat_map(|fq| globalize_intention_points(&fq.points, &fq.pose)).collect();
                let nb = self.query_neighborhoods(&poses, nf);
                let rel = RelativeEncoding::new(g, &poses, nb.clone(), self.hidden_dim)?;
                (nb, Some(rel))
            }
        };
        Ok(Context {
            tokens,
            pe_table,
            num_agents: na,
            num_tokens: positions.len(),
            agent_keys: (0..na).filter(|&i| input.agent_valid.get(i).copied().unwrap_or(true)).collect(),
            local_map,
            map_valid: input.map_valid.to_vec(),
            self_nb,
            self_rel,
        })
    }

    /// Agent tokens plus each query's collected map tokens.
    fn cross_pairs(&self, ctx: &Context, input: &DecoderInput<'_>, previous: Option<&[Vec<[f64; 2]>]>) -> CrossPairs {
        let k = self.cfg.num_modes;
        let mut tokens = Vec::new();
        let mut table = Vec::new();
        let mut offsets = vec![0];
        for (t, fq) in input.focal.iter().enumerate() {
            for m in 0..k {
                let path = match previous {
                    None => CollectionPath::Segment([0.0, 0.0], fq.points[m]),
                    Some(w) => CollectionPath::Waypoints(&w[t * k + m]),
                };
                let map = collect_map_tokens(path, &ctx.local_map[t], &ctx.map_valid, self.cfg.map_collect);
                for tok in ctx.agent_keys.iter().copied().chain(map.into_iter().map(|i| ctx.num_agents + i)) {
                    tokens.push(tok);
                    table.push(t * ctx.num_tokens + tok);
                }
                offsets.push(tokens.len());
            }
        }
        CrossPairs {
            tokens,
            table,
            offsets: Arc::new(offsets),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, input: &DecoderInput<'_>) -> Result<DecoderOutput> {
        let k = self.cfg.num_modes;
        let nf = input.focal.len();
        if nf == 0 {
            return Err(Error::invalid("no focal agents to decode"));
        }
        let ctx = self.context(g, input)?;
        let points: Vec<[f64; 2]> = input.focal.iter().flat_map(|fq| fq.points.iter().copied()).collect();
        let e = self.query_embeddings(g, store, &points)?;
        let mut f = g.constant(Tensor::zeros(&[nf * k, self.hidden_dim]));
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut waypoints: Option<Vec<Vec<[f64; 2]>>> = None;
        for layer in &self.layers {
            let pairs = self.cross_pairs(&ctx, input, waypoints.as_deref());
            let (next, out) = layer.forward(g, store, &ctx, f, e, &pairs, nf, k)?;
            f = next;
            layers.push(out);
            let partial = DecoderOutput {
                layers: vec![out],
                num_focal: nf,
                num_modes: k,
                horizon: self.horizon,
            };
            waypoints = Some(partial.mean_waypoints(g, 0));
        }
        Ok(DecoderOutput {
            layers,
            num_focal: nf,
            num_modes: k,
            horizon: self.horizon,
        })
    }
}

/// Single-trajectory baseline: an MLP on each focal agent's feature.
#[derive(Clone, Debug)]
pub struct MlpHead {
    mlp: Mlp,
    horizon: usize,
}

impl MlpHead {
    pub fn new(store: &mut ParameterStore, name: &str, hidden_dim: usize, horizon: usize) -> Result<Self> {
        let d = hidden_dim;
        Ok(Self {
            mlp: Mlp::new(store, name, &[d, 2 * d, 2 * d, horizon * 5], Activation::Relu)?,
            horizon,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, input: &DecoderInput<'_>) -> Result<DecoderOutput> {
        let nf = input.focal.len();
        if nf == 0 {
            return Err(Error::invalid("no focal agents to decode"));
        }
        let rows: Vec<usize> = input.focal.iter().map(|fq| fq.row).collect();
        let x = g.gather_rows(input.agents, &rows)?;
        let trajectories = self.mlp.forward(g, store, x)?;
        let log_probs = g.constant(Tensor::zeros(&[nf, 1]));
        Ok(DecoderOutput {
            layers: vec![LayerOutput { log_probs, trajectories }],
            num_focal: nf,
            num_modes: 1,
            horizon: self.horizon,
        })
    }
}
