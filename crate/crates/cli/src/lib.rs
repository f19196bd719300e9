//! Experiment runner: JSON configuration in, CSV and JSON artifacts out.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use commands::RunContext;
pub use config::{load_config, parse_config, ExperimentConfig};
pub use error::CliError;
