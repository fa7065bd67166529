//! Three-stage multimodal embedding training on a miniature transformer:
//! bidirectional warm-up, EOS-bridged reconstruction and contrastive tuning,
//! with a synthetic data generator and evaluation harness.
//!
//! The autodiff core in [`tensor`] is generic over its scalar; the model and
//! trainer run in `f64` through the aliases below.

pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod mask;
pub mod masking;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use tensor::Var;

/// Double-precision tensor used throughout the model and trainer.
pub type Tensor = tensor::Tensor<f64>;
/// Double-precision tape.
pub type Graph = tensor::Graph<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph32 = tensor::Graph<f32>;
