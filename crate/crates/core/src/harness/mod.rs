//! Run configuration, dataset ingestion and the command implementations
//! used by the `gsb` binary.

pub mod checks;
pub mod commands;
pub mod config;
pub mod data;

pub use config::{DatasetConfig, DatasetKind, RunConfig};
