//! Federated-learning simulator for studying attacks on attribute-level
//! fairness.
//!
//! A single malicious client inverts FedAvg: it trains a target update on
//! data containing only the attributes it wants to favour, predicts the
//! honest clients' updates from a representative dataset, and submits the
//! update that makes the weighted average land on its target. Honest clients
//! train normally. The server may screen updates by magnitude before
//! aggregating.
//!
//! Module map:
//!
//! * [`model`]: parameters, softmax regression / tanh MLP, SGD, evaluation
//! * [`data`]: synthetic Gaussian clusters, CSV I/O, partitioning, filtering
//! * [`federation`]: FedAvg, rounds, honest clients
//! * [`attack`]: target update, clean-update prediction, malicious solve
//! * [`defense`]: norm clipping and outlier exclusion
//! * [`metrics`]: fairness gap, round records, CSV, reports
//! * [`config`] / [`experiment`]: experiment files, runs and scenario suites

pub mod attack;
pub mod config;
pub mod data;
pub mod defense;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod metrics;
pub mod model;
pub mod params;
pub mod seed;

pub use error::{Error, Result};
pub use params::ParameterVector;
