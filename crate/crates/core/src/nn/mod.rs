//! Activations, class-distribution math and graph layers.

pub mod activation;
pub mod layers;
pub mod prob;

pub use activation::{mish, mish_grad, mish_grad2, sigmoid, softplus, ActivationKind};
pub use layers::{dense, global_average_pool, linear, mish_composite};
pub use prob::{
    argmax, cross_entropy, kl_divergence, one_hot, shannon_entropy, stable_softmax, CrossEntropy,
    LogitVector,
};
