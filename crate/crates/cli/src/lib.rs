//! Experiment orchestration for temperature-scaled classifiers: config
//! files, sweeps with hashed result bundles, and the `tempscale` binary's
//! subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod sweep;

pub use config::ExperimentConfig;
pub use error::{exit, CliError, CliResult};
pub use sweep::{run_sweep, RunKind, SweepResult};

/// Environment variable naming the directory relative dataset paths
/// resolve against.
pub const CACHE_DIR_ENV: &str = "TEMPSCALE_CACHE_DIR";
