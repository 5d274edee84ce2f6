//! Experiment runner behind the `stochflow` binary: config parsing, run
//! manifests and the train / eval / sample / sweep / ablate-gamma commands.

pub mod commands;
pub mod config;
pub mod manifest;

pub use commands::Overrides;
pub use config::{ConfigError, RunConfig};
