//! Parameterized building blocks on top of [`Graph`].
//!
//! Layers only hold parameter names; values live in a [`ParameterStore`], so
//! one layer description serves any number of graphs.

use super::graph::{Graph, Var};
use super::params::ParameterStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Identity => x,
        }
    }
}

/// Affine map `x · W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: String,
    bias: Option<String>,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParameterStore, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let weight = format!("{name}.weight");
        store.init_uniform_weight(&weight, in_dim, out_dim)?;
        let bias = if bias {
            let b = format!("{name}.bias");
            store.init_constant(&b, &[out_dim], 0.0)?;
            Some(b)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }

    pub fn bias_name(&self) -> Option<&str> {
        self.bias.as_deref()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight)?;
        let b = match &self.bias {
            Some(b) => Some(g.param(store, b)?),
            None => None,
        };
        g.linear(x, w, b)
    }
}

/// Multi-layer perceptron: affine then activation on every hidden layer, the
/// last layer affine only. Inputs of rank > 2 are flattened over their leading
/// extents and restored afterwards.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
    activation: Activation,
}

impl Mlp {
    /// `dims` lists every width from input to output, e.g. `[8, 32, 32]`.
    pub fn new(store: &mut ParameterStore, name: &str, dims: &[usize], activation: Activation) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(format!("{name}: an MLP needs at least an input and an output width")));
        }
        if dims.contains(&0) {
            return Err(Error::Config(format!("{name}: layer widths must be positive, got {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, activation })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let d_in = *shape.last().unwrap_or(&0);
        if d_in != self.in_dim() {
            return Err(Error::shape("mlp", format!("input width {d_in}, expected {}", self.in_dim())));
        }
        let flat = shape.len() != 2;
        let mut h = if flat {
            let rows = shape[..shape.len() - 1].iter().product();
            g.reshape(x, &[rows, d_in])?
        } else {
            x
        };
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i < last {
                h = self.activation.apply(g, h);
            }
        }
        if flat {
            let mut out_shape = shape;
            *out_shape.last_mut().expect("non-empty shape") = self.out_dim();
            h = g.reshape(h, &out_shape)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: String,
    beta: String,
}

impl LayerNorm {
    pub fn new(store: &mut ParameterStore, name: &str, dim: usize) -> Result<Self> {
        let gamma = format!("{name}.gamma");
        let beta = format!("{name}.beta");
        store.init_constant(&gamma, &[dim], 1.0)?;
        store.init_constant(&beta, &[dim], 0.0)?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, &self.gamma)?;
        let beta = g.param(store, &self.beta)?;
        g.layer_norm(x, gamma, beta)
    }
}

/// Position-wise feed-forward block `D → 2D → D`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    mlp: Mlp,
}

impl FeedForward {
    pub fn new(store: &mut ParameterStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, name, &[dim, 2 * dim, dim], Activation::Relu)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        self.mlp.forward(g, store, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    #[test]
    fn single_affine_relu_layer_matches_hand_evaluation() {
        // One hidden layer with identity weights followed by an identity output layer.
        let mut store = ParameterStore::new(0);
        let mlp = Mlp::new(&mut store, "m", &[2, 2, 2], Activation::Relu).unwrap();
        store.set("m.0.weight", Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()).unwrap();
        store.set("m.0.bias", Tensor::vector(vec![0.5, 0.5])).unwrap();
        store.set("m.1.weight", Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap());
        let y = mlp.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).data(), &[1.5, 0.0]);
    }

    #[test]
    fn identity_layer_is_passthrough() {
        let mut store = ParameterStore::new(0);
        let mlp = Mlp::new(&mut store, "m", &[2, 2], Activation::Relu).unwrap();
        store.set("m.0.weight", Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let y = mlp.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn leading_extents_are_preserved() {
        let mut store = ParameterStore::new(1);
        let mlp = Mlp::new(&mut store, "m", &[8, 16, 256], Activation::Relu).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 20, 8]));
        let y = mlp.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[3, 20, 256]);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let mut store = ParameterStore::new(1);
        let mlp = Mlp::new(&mut store, "m", &[3, 4], Activation::Relu).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 5]));
        assert!(matches!(mlp.forward(&mut g, &store, x), Err(Error::Shape { .. })));
    }
}
