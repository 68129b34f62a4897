//! Multi-scale adaptive graph neural network for multivariate time-series
//! forecasting.
//!
//! The model reads an N-variable window of T timesteps and predicts the
//! values h steps ahead. It builds a feature pyramid over time scales,
//! learns a directed variable graph per scale from trainable embeddings,
//! propagates information with per-scale graph and dilated temporal
//! convolutions, and merges the scales through a learned gate before a small
//! convolutional output head.
//!
//! Everything — including the reverse-mode autodiff engine in [`tensor`] —
//! is implemented in this crate in f64. The `magnn` binary exposes training,
//! evaluation, ablation, and synthetic-data generation as batch commands.

pub mod check;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gnn;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod pyramid;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
