//! Deterministic simulation engine for personalized federated learning with
//! first-order estimates of non-local risks (PGFed, PGFedMo, PGFed-CE), plus
//! the Local, FedAvg, FedAvg+fine-tune and explicit-oracle baselines.
//!
//! Modules, bottom-up:
//!
//! * [`numerics`]: parameter vectors and the seeded generator.
//! * [`datagen`]: synthetic blobs, Dirichlet partitioning, CSV ingestion.
//! * [`models`]: softmax-linear and tanh-MLP classifiers, SGD-momentum.
//! * [`algorithms`]: client update rules.
//! * [`fedcore`]: selection, server aggregates, the round engine, checkpoints.
//! * [`metrics`]: accuracy records, the communication ledger, α analytics.

pub mod algorithms;
pub mod datagen;
pub mod error;
pub mod fedcore;
pub mod metrics;
pub mod models;
pub mod numerics;

pub use algorithms::{AlgorithmTag, ClientUpdatePayload};
pub use datagen::{ClientDataset, Dataset, PartitionSpec};
pub use error::{Error, Result};
pub use fedcore::{AlphaGradient, Federation, FederationConfig, OracleSettings, RoundOutcome};
pub use metrics::{CommLedger, RoundRecord};
pub use models::{ModelKind, ModelSpec, OptimizerState};
pub use numerics::{ParamVector, SeededRng};
