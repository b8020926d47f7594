//! Command-line front end: configs, checkpoints, reports and the
//! experiment commands built on `scott-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod report;

pub use scott_core as core;

pub use commands::{run, Command, Outcome};
pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
