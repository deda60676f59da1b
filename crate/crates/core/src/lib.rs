//! Offline model-based optimization with a diversity-seeking distribution
//! matching penalty and a Wasserstein critic constraint, wrapped around
//! interchangeable batch optimizers.
//!
//! The typical flow is [`runner::prepare`] to obtain a task and its offline
//! dataset, then [`runner::run_on`] to produce a scored top-k candidate set.

pub mod dataset;
pub mod density;
pub mod duality;
pub mod error;
pub mod matrix;
pub mod metrics;
pub mod neural;
pub mod objective;
pub mod optimizers;
pub mod rng;
pub mod runner;
pub mod tasks;

pub use dataset::{DesignKind, OfflineDataset, TauWeights};
pub use duality::{Divergence, PenaltyConfig};
pub use error::{DynamoError, Result};
pub use matrix::Matrix;
pub use runner::{run, run_on, RunConfig, RunResult};
