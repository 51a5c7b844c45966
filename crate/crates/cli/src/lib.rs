//! Experiment orchestration for `fasw`: configuration, run directories,
//! reports and plots, and the subcommands built on them.

pub mod commands;
pub mod config;
pub mod plots;
pub mod report;
pub mod run;

pub use commands::{run_command, Cli, CliError, Command};
pub use config::ExperimentConfig;
pub use report::Report;
