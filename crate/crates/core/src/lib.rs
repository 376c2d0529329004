//! Split-inference toolkit for multilayer perceptrons.
//!
//! The first layer(s) of a network run on the data owner's device, a few of
//! the transmitted activation outputs are dropped, and the remaining layers run
//! on a server that never sees the raw input. Alongside the mechanism the crate
//! ships the adversary's side: exact and approximate inversion of the
//! transmitted activations, brute-force cost analysis and the repeated-query
//! attack, plus the metrics used to score them.
//!
//! Modules, bottom-up:
//!
//! - [`rng`]: the SplitMix64 generator behind every random draw.
//! - [`linalg`]: dense matrices, a pivoting solver, right pseudo-inverse.
//! - [`activations`]: forward functions and their (approximate) inverses.
//! - [`network`]: MLP model, training, model files.
//! - [`data`]: MNIST IDX loading and synthetic datasets.
//! - [`splitexec`]: client/server halves, drop masks, split training.
//! - [`attacks`]: reconstruction strategies and cost models.
//! - [`metrics`]: KL divergence, reconstruction error, accuracy sweeps.

pub mod activations;
pub mod attacks;
pub mod data;
pub mod linalg;
pub mod metrics;
pub mod network;
pub mod rng;
pub mod splitexec;

pub use activations::Activation;
pub use data::Dataset;
pub use linalg::Matrix;
pub use network::{evaluate, Architecture, LayerParams, MlpModel, TrainConfig};
