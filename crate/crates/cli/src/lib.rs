//! Command implementations behind the `mongeflow` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod run;

pub use commands::{
    cmd_fit, cmd_info, cmd_prior_error, cmd_sample, cmd_verify, load_artifacts, PriorError, VerifyOutcome,
};
pub use config::{Overrides, RunConfig, SampleSource};
pub use error::CliError;
