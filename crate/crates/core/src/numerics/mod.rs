//! Dense `f64` tensors, a reverse-mode tape, parameterized layers, attention,
//! positional encodings and a finite-difference gradient oracle.

pub mod attention;
pub mod encoding;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod tensor;

pub use attention::{MultiHeadAttention, Neighborhoods};
pub use encoding::{relative_pose_pe, sinusoidal_pe};
pub use gradcheck::{gradient_check, GradCheckConfig, GradCheckReport};
pub use graph::{AttentionStats, Backprop, Graph, Var};
pub use layers::{Activation, FeedForward, LayerNorm, Linear, Mlp};
pub use params::{Gradients, ParameterRecord, ParameterStore};
pub use tensor::Tensor;
