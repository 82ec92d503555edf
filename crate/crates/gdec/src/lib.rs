//! Command-line driver for `gdec-core`: the model-bridge client, file
//! formats and run configuration.

pub mod bridge;
pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod formats;

pub use error::{CliError, CliResult};
