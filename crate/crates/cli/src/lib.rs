//! Library side of the `fslab` binary: config parsing, the experiment
//! commands and their exit codes.

pub mod commands;
pub mod config;
pub mod error;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
