//! Deterministic federated learning simulator built around element-wise
//! adaptive weight aggregation, with FedAvg, FedOpt (Adam/Adagrad/Yogi),
//! FedAMS, FedAdp and FedBoosting as baselines.
//!
//! The pieces, bottom up:
//!
//! - [`tensor`]: named flat tensors and cross-client element-wise softmax
//! - [`model`]: softmax regression and a one-hidden-layer MLP with analytic gradients
//! - [`data`]: IDX loading, synthetic blobs, splitting and client partitioning
//! - [`local`]: client-side SGD producing pseudo-gradients
//! - [`aggregate`]: the server strategies
//! - [`federation`]: the round loop
//! - [`config`] and [`report`]: run configuration and metrics files

pub mod aggregate;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod local;
pub mod model;
pub mod report;
pub mod tensor;

pub use aggregate::{Aggregator, AggregatorConfig, AggregatorState, Strategy, Variant};
pub use data::{Dataset, Partition};
pub use error::{FlError, Result};
pub use federation::{run_federation, Federation, FederationConfig, RoundRecord};
pub use local::{ClientUpdate, LocalConfig};
pub use model::{ModelKind, ModelSpec};
pub use tensor::ParameterSet;
