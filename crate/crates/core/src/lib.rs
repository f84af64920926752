//! fedlab-core: a simulation laboratory for federated learning on a single box.
//!
//! Everything is deterministic given a seed: dataset partitioning, model
//! init, client selection, local training, and data-free knowledge fusion.
//! Numerics are f64 end to end; checkpoints quantize to little-endian f32.

pub mod baselines;
pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod optim;
pub mod records;
pub mod rng;
pub mod server;

pub use error::{Error, Result};
pub use models::ModelWeights;

/// Dynamic-rank f64 tensor used throughout the crate.
pub type Tensor = ndarray::ArrayD<f64>;
