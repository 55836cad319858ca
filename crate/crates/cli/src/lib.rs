//! Experiment runner for the `fire` binary: config parsing, dataset
//! construction, mode dispatch and CSV output.

pub mod config;
pub mod data;
pub mod error;
pub mod runner;

pub use config::{parse_config, ExperimentConfig, Mode};
pub use error::{CliError, Result};
pub use runner::{execute, run};
