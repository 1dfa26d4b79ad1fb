//! Intention-query motion prediction transformers at desk scale.
//!
//! The crate covers the full pipeline: a small differentiable tensor substrate
//! ([`numerics`]), scene vectorization and a synthetic scenario generator
//! ([`scene`]), focal-centric and symmetric context encoders ([`encoder`]),
//! the intention-query decoder with GMM heads ([`decoder`]), losses and the
//! training loop ([`training`]) and metrics plus efficiency benchmarks
//! ([`evaluation`]).

pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod scene;
pub mod training;

pub use error::{Error, Result};
