//! Hypernetwork-based mixture of experts that discovers latent domains in
//! mixed-domain training data.
//!
//! A D2V encoder maps each example into an embedding space holding one
//! learnable anchor per expert. Distances to the anchors produce gate
//! values, a hypernetwork turns each anchor into classifier weights, and the
//! prediction is the gate-weighted sum of the resulting experts.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gating;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod report;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
