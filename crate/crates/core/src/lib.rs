//! Multimodal classification with uncertainty-weighted dynamic fusion.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`] and [`graph`]: dense `f64` tensors and a reverse-mode
//!   differentiation graph, with [`gradcheck`] for finite-difference checks.
//! - [`nn`]: Mish and other activations, stabilised softmax, entropy and
//!   cross-entropy, dense and pooling layers.
//! - [`encoders`]: a staged convolutional image encoder under a compound
//!   scaling constraint, a token-bag text encoder, feature up-sampling and
//!   the parameter checkpoint format.
//! - [`fusion`]: late, early and entropy-gated dynamic fusion, the full
//!   model, training and prediction.
//! - [`data`]: the synthetic noisy multimodal generator, metrics,
//!   precision histograms and class stratification.
//! - [`experiment`]: reproducible experiment drivers used by the CLI.

pub mod data;
pub mod encoders;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Reduce, Unary, Var};
pub use tensor::{Shape, Tensor, TensorError};
