//! PointNet-style polyline encoder: a shared per-point MLP followed by a
//! masked max-pool over the points of each polyline.

use crate::error::Result;
use crate::numerics::{Activation, Graph, Mlp, ParameterStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct PolylineEncoder {
    mlp: Mlp,
}

impl PolylineEncoder {
    /// `dims` runs from the point channel count to the output width.
    pub fn new(store: &mut ParameterStore, name: &str, dims: &[usize]) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, name, dims, Activation::Relu)?,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.mlp.out_dim()
    }

    /// Encodes `[count, points, channels]` into `[count, out_dim]`. Polylines
    /// without a valid point produce zeros and a `false` validity bit.
    pub fn forward_var(&self, g: &mut Graph, store: &ParameterStore, x: Var, mask: &[bool]) -> Result<(Var, Vec<bool>)> {
        let shape = g.shape(x).to_vec();
        let (count, points, channels) = (shape[0], shape[1], shape[2]);
        let flat = g.reshape(x, &[count * points, channels])?;
        let h = self.mlp.forward(g, store, flat)?;
        g.masked_max_pool(h, mask, points)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: &Tensor, mask: &[bool]) -> Result<(Var, Vec<bool>)> {
        let v = g.constant(x.clone());
        self.forward_var(g, store, v, mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enc() -> (ParameterStore, PolylineEncoder) {
        let mut store = ParameterStore::new(4);
        let e = PolylineEncoder::new(&mut store, "pl", &[3, 8, 8]).unwrap();
        (store, e)
    }

    #[test]
    fn single_point_equals_point_mlp() {
        let (store, e) = enc();
        let x = Tensor::new(vec![1, 1, 3], vec![0.2, -0.4, 1.0]).unwrap();
        let mut g = Graph::new();
        let (f, valid) = e.forward(&mut g, &store, &x, &[true]).unwrap();
        let flat = g.constant(x.clone().reshape(&[1, 3]).unwrap());
        let direct = e.mlp.forward(&mut g, &store, flat).unwrap();
        assert_eq!(valid, vec![true]);
        assert_eq!(g.value(f).data(), g.value(direct).data());
    }

    #[test]
    fn point_order_does_not_matter() {
        let (store, e) = enc();
        let a = Tensor::new(vec![1, 3, 3], vec![0.1, 0.2, 0.3, -1.0, 0.5, 0.0, 0.7, -0.7, 0.2]).unwrap();
        let b = Tensor::new(vec![1, 3, 3], vec![0.7, -0.7, 0.2, 0.1, 0.2, 0.3, -1.0, 0.5, 0.0]).unwrap();
        let mut g = Graph::new();
        let (fa, _) = e.forward(&mut g, &store, &a, &[true; 3]).unwrap();
        let (fb, _) = e.forward(&mut g, &store, &b, &[true; 3]).unwrap();
        assert_eq!(g.value(fa).data(), g.value(fb).data());
    }

    #[test]
    fn features_change_only_where_the_max_moves() {
        let (store, e) = enc();
        let base = vec![0.1, 0.2, 0.3, -1.0, 0.5, 0.0];
        let mut bumped = base.clone();
        bumped[3] = 4.0;
        let mut g = Graph::new();
        let pts_a = g.constant(Tensor::new(vec![2, 3], base.clone()).unwrap());
        let pts_b = g.constant(Tensor::new(vec![2, 3], bumped.clone()).unwrap());
        let ha = e.mlp.forward(&mut g, &store, pts_a).unwrap();
        let hb = e.mlp.forward(&mut g, &store, pts_b).unwrap();
        let (ha, hb) = (g.value(ha).clone(), g.value(hb).clone());
        let (fa, _) = e.forward(&mut g, &store, &Tensor::new(vec![1, 2, 3], base).unwrap(), &[true; 2]).unwrap();
        let (fb, _) = e.forward(&mut g, &store, &Tensor::new(vec![1, 2, 3], bumped).unwrap(), &[true; 2]).unwrap();
        for c in 0..8 {
            let max_a = ha.get2(0, c).max(ha.get2(1, c));
            let max_b = hb.get2(0, c).max(hb.get2(1, c));
            assert_eq!(g.value(fa).get2(0, c), max_a);
            assert_eq!(g.value(fb).get2(0, c), max_b);
            assert_eq!(max_a != max_b, g.value(fa).get2(0, c) != g.value(fb).get2(0, c));
        }
    }

    #[test]
    fn empty_polyline_is_flagged() {
        let (store, e) = enc();
        let x = Tensor::zeros(&[2, 2, 3]);
        let mut g = Graph::new();
        let (f, valid) = e.forward(&mut g, &store, &x, &[true, false, false, false]).unwrap();
        assert_eq!(valid, vec![true, false]);
        assert!(g.value(f).row(1).iter().all(|&v| v == 0.0));
    }
}
