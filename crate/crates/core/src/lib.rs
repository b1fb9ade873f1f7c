//! Tabular regression with a multi-head attention deep & cross network.
//!
//! The crate covers the whole workflow on city-panel data:
//!
//! - [`features`]: schema, CSV ingestion, standardization, seeded splits
//! - [`madcn`]: the network, its layers and binary persistence
//! - [`training`]: MSE loss, Adam, the mini-batch loop and evaluation
//! - [`metrics`]: MSE, MAE and R²
//! - [`baselines`]: ridge regression, k-nearest neighbors and network ablations
//! - [`explain`]: exact and sampled Shapley attribution plus table exports
//! - [`workflow`]: the file-based train, evaluate, predict, explain and
//!   benchmark runs behind the command-line tool
//!
//! Every layer implements [`numcore::Differentiable`] so its backward pass can
//! be verified against central differences with [`numcore::grad_check`].

pub mod baselines;
pub mod container;
pub mod error;
pub mod explain;
pub mod features;
pub mod madcn;
pub mod metrics;
pub mod numcore;
pub mod regressor;
pub mod seeds;
pub mod synthetic;
pub mod training;
pub mod workflow;

pub use error::{Error, Result};
pub use features::{Dataset, FeatureSchema, SplitIndices, StandardizerStats};
pub use madcn::{MadcnModel, ModelConfig, ModelKind};
pub use metrics::MetricTriple;
pub use numcore::Matrix;
pub use regressor::Regressor;
pub use training::{TrainConfig, TrainReport};
pub use workflow::RunConfig;
