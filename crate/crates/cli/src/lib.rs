//! Experiment front end: configuration, dataset generation, scenario runs,
//! report aggregation and the hub commands.

pub mod commands;
pub mod config;
pub mod error;
pub mod fsutil;

pub use commands::{
    bind_hub, cmd_contribute, cmd_generate, cmd_report, cmd_run, initial_base, load_data, ContributeOptions,
    Generated, ReportOutcome, RunOptions, RunOutcome,
};
pub use config::{ExperimentConfig, HubSettings};
pub use error::CliError;
