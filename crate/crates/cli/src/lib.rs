//! Front end for running training experiments, cost models, pipeline
//! schedules and energy estimates from one TOML experiment file.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;

pub use config::{parse_config, parse_config_str, ExperimentConfig};
pub use error::CliError;
