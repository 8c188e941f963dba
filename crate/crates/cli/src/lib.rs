//! Configuration and execution behind the `favi` binary.
//!
//! - [`config`]: the sectioned `key = value` run configuration and its validation.
//! - [`run`]: executes one experiment stage, writing CSVs and a JSON manifest.

pub mod config;
pub mod run;

pub use config::{parse_config, parse_config_with, ConfigError, ConfigErrors, Experiment, RunConfig, Stage};
pub use run::{run, CliError, RunOutcome};
