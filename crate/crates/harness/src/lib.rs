//! Experiment harness: synthetic corpus generation, binary checkpoints,
//! experiment runners, metrics CSVs, and the `rfrp` command-line frontend.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod registry;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
