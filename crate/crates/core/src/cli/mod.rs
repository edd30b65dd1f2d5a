//! Command-line driver: a config file in, one CSV out.

pub mod commands;
pub mod config;

pub use commands::{exit_code, random_trials, run, Command, Outcome};
pub use config::{BackendChoice, ExperimentConfig};
