//! Benchmark toolkit for federated learning on multi-semantic datasets.
//!
//! The pipeline turns annotation records into category tensors, discovers
//! semantic clusters with K-means, balances them, distributes samples to
//! clients with a controllable amount of semantic heterogeneity, and then
//! simulates federated rounds of a surrogate relation classifier under
//! FedAvg, FedAvgM or FedAdam aggregation.
//!
//! ```no_run
//! use fedsem_core::config::ExperimentConfig;
//! use fedsem_core::pipeline;
//!
//! let cfg = ExperimentConfig::load("configs/quickstart.json".as_ref()).unwrap();
//! let data = pipeline::prepare_data(&cfg).unwrap();
//! let clustering = pipeline::cluster(&cfg, &data).unwrap();
//! let (_, plan) = pipeline::partition(&cfg, &clustering.assignment).unwrap();
//! let outcome = pipeline::simulate(&cfg, &data, &plan, false).unwrap();
//! println!("{} rounds", outcome.history.records.len());
//! ```

pub mod config;
pub mod datagen;
mod error;
pub mod flcore;
pub mod io;
pub mod metrics;
pub mod partition;
pub mod pipeline;
pub mod seed;
pub mod semantics;
pub mod trainer;

pub use error::{Error, Result};
