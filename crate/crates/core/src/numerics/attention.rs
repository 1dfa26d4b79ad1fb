//! Multi-head attention over explicit per-query neighborhoods.

use std::sync::Arc;

use super::graph::{Graph, Var};
use super::layers::Linear;
use super::params::ParameterStore;
use crate::error::{Error, Result};

/// Per-query key lists in compressed row form: the keys of query `i` are
/// `indices[offsets[i]..offsets[i + 1]]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Neighborhoods {
    offsets: Arc<Vec<usize>>,
    indices: Vec<usize>,
}

impl Neighborhoods {
    pub fn from_lists(lists: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut indices = Vec::new();
        offsets.push(0);
        for l in lists {
            indices.extend_from_slice(l);
            offsets.push(indices.len());
        }
        Self {
            offsets: Arc::new(offsets),
            indices,
        }
    }

    /// Every query sees every key, in key order.
    pub fn full(num_queries: usize, num_keys: usize) -> Self {
        let all: Vec<usize> = (0..num_keys).collect();
        Self::from_lists(&vec![all; num_queries])
    }

    pub fn num_queries(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_pairs(&self) -> usize {
        self.indices.len()
    }

    pub fn get(&self, i: usize) -> &[usize] {
        &self.indices[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn offsets(&self) -> &Arc<Vec<usize>> {
        &self.offsets
    }

    /// For every pair, the index of the query that owns it.
    pub fn pair_queries(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.indices.len());
        for i in 0..self.num_queries() {
            out.extend(std::iter::repeat_n(i, self.offsets[i + 1] - self.offsets[i]));
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> {
        (0..self.num_queries()).map(move |i| self.get(i))
    }

    fn check(&self, num_keys: usize) -> Result<()> {
        for (i, l) in self.iter().enumerate() {
            if l.is_empty() {
                return Err(Error::EmptyNeighborhood { query: i });
            }
            if let Some(&bad) = l.iter().find(|&&j| j >= num_keys) {
                return Err(Error::invalid(format!("query {i} references key {bad} of {num_keys}")));
            }
        }
        Ok(())
    }
}

/// Query, key, value and output projections around the segmented attention
/// primitive.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        q_in: usize,
        k_in: usize,
        v_in: usize,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{name}: width {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), q_in, dim, true)?,
            k: Linear::new(store, &format!("{name}.k"), k_in, dim, true)?,
            v: Linear::new(store, &format!("{name}.v"), v_in, dim, true)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true)?,
            heads,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Keys and values are token rows; each query attends to the tokens listed
    /// in its neighborhood. Projections are computed once per token.
    pub fn forward_tokens(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        xq: Var,
        xk: Var,
        xv: Var,
        nbrs: &Neighborhoods,
    ) -> Result<Var> {
        if nbrs.num_queries() != g.shape(xq)[0] {
            return Err(Error::shape(
                "attention",
                format!("{} neighborhoods for {} queries", nbrs.num_queries(), g.shape(xq)[0]),
            ));
        }
        nbrs.check(g.shape(xk)[0])?;
        let q = self.q.forward(g, store, xq)?;
        let k = self.k.forward(g, store, xk)?;
        let v = self.v.forward(g, store, xv)?;
        let kp = g.gather_rows(k, nbrs.indices())?;
        let vp = g.gather_rows(v, nbrs.indices())?;
        let a = g.attention(q, kp, vp, Arc::clone(nbrs.offsets()), self.heads)?;
        self.out.forward(g, store, a)
    }

    /// Keys and values are given per pair (rows grouped by query via
    /// `offsets`), for inputs that depend on both ends of the pair.
    pub fn forward_pairs(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        xq: Var,
        pair_k: Var,
        pair_v: Var,
        offsets: &Arc<Vec<usize>>,
    ) -> Result<Var> {
        let q = self.q.forward(g, store, xq)?;
        let k = self.k.forward(g, store, pair_k)?;
        let v = self.v.forward(g, store, pair_v)?;
        let a = g.attention(q, k, v, Arc::clone(offsets), self.heads)?;
        self.out.forward(g, store, a)
    }
}
