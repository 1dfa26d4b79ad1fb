//! Dense future prediction for every agent and feature enhancement with the
//! re-encoded predicted futures.

use super::polyline::PolylineEncoder;
use crate::error::Result;
use crate::numerics::{Activation, Graph, Mlp, ParameterStore, Var};

#[derive(Clone, Debug)]
pub struct DenseFuturePredictor {
    head: Mlp,
    future_encoder: PolylineEncoder,
    fusion: Mlp,
    future_frames: usize,
}

impl DenseFuturePredictor {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        d: usize,
        polyline_layers: &[usize],
        future_frames: usize,
    ) -> Result<Self> {
        let mut enc_dims = vec![4];
        enc_dims.extend(polyline_layers);
        enc_dims.push(d);
        Ok(Self {
            head: Mlp::new(store, &format!("{name}.head"), &[d, d, future_frames * 4], Activation::Relu)?,
            future_encoder: PolylineEncoder::new(store, &format!("{name}.future_polyline"), &enc_dims)?,
            fusion: Mlp::new(store, &format!("{name}.fusion"), &[2 * d, d, d, d], Activation::Relu)?,
            future_frames,
        })
    }

    pub fn future_frames(&self) -> usize {
        self.future_frames
    }

    /// Returns the predicted futures `[N_a, T_f · 4]` and the enhanced agent
    /// features `[N_a, D]`.
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, agents: Var) -> Result<(Var, Var)> {
        let n = g.shape(agents)[0];
        let future = self.head.forward(g, store, agents)?;
        let points = g.reshape(future, &[n, self.future_frames, 4])?;
        let mask = vec![true; n * self.future_frames];
        let (encoded, _) = self.future_encoder.forward_var(g, store, points, &mask)?;
        let both = g.concat_cols(&[agents, encoded])?;
        let enhanced = self.fusion.forward(g, store, both)?;
        Ok((future, enhanced))
    }
}
