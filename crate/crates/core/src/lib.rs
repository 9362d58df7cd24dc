//! Deterministic single-process federated learning simulator.
//!
//! The crate covers the whole pipeline of a federated training run:
//! synthetic and label-skewed node datasets, softmax models trained with
//! local SGD, FedAvg averaging, greedy exclusion of adverse updates
//! ([`aggregation::optimal_aggregation`]), probabilistic node selection
//! ([`selection::update_probabilities`]) and the round orchestrator that ties
//! them together with per-round metrics and a centralized-SGD divergence
//! diagnostic.
//!
//! Every random draw comes from a ChaCha substream keyed by the master seed
//! and the role of the draw, so two runs that differ only in policy see the
//! same data, the same initial model and the same per-node training noise.

pub mod aggregation;
pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod error;
pub mod models;
pub mod orchestrator;
pub mod params;
pub mod rng;
pub mod selection;

pub use error::{Error, Result};
pub use params::ParamVector;

/// Index of a node in the federation, `0..num_nodes`.
pub type NodeId = usize;
