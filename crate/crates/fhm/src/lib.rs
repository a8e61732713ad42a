//! FHM: a glass-box neural network that imitates a fuzzy cognitive map.
//!
//! The crate trains a small differentiable model whose inner weight matrix is
//! masked by a known causal topology, so the learned weights can be read off
//! and compared against the ground-truth signs edge by edge. Around that core
//! it provides:
//!
//! - [`tensor`]: dense matrices and a reverse-mode differentiation tape
//! - [`fcm`]: a classical fuzzy-cognitive-map simulator used as the reference
//!   dynamics and as the synthetic data generator
//! - [`model`]: the encoder, masked propagation operator, scoring, and heads
//! - [`training`]: losses, SGD with momentum and decaying Gaussian noise, and
//!   cross-validation over contiguous folds
//! - [`inverse`]: an annealed masked solver that recovers inputs which drive
//!   chosen nodes toward target values
//! - [`data`]: built-in topologies, synthetic dataset generation, CSV loading
//! - [`evalmetrics`]: sign-recovery accuracies and report aggregation
//! - [`cli`]: the `fhm` command-line entry points

pub mod cli;
pub mod data;
pub mod evalmetrics;
pub mod fcm;
pub mod inverse;
pub mod model;
pub mod tensor;
pub mod training;

pub use tensor::{Matrix, Tape};
