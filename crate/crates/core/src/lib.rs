//! Deterministic federated-learning simulator.
//!
//! Synthetic or CSV datasets are split across simulated clients by a
//! Dirichlet label-skew model, trained with FedAvg and its variants
//! (server momentum, importance reweighting, virtual clients), and
//! measured with an earth mover's distance between label distributions.
//! Every random choice flows from a single root seed.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod partition;
pub mod rng;

pub use dataset::{ClassDistribution, Dataset, IndexSet};
pub use engine::{
    run_training, FedConfig, FederatedTrainer, RoundRecord, TargetDistribution, TrainingRun,
};
pub use error::{FedError, Result};
pub use model::{ModelKind, ModelParams, ModelSpec};
pub use partition::{Client, ClientPartition, DirichletSpec};
