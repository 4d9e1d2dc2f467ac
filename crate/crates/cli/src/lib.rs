//! Command-line front end for the `mvjump-core` experiments.
//!
//! Every subcommand writes a CSV table followed by `# key=value` footer
//! lines (seed, crate version, wall time). Exit status is 0 on success,
//! 1 when a diagnostic fails or a run aborts, and 2 for usage or
//! configuration errors.

pub mod commands;
pub mod config;
pub mod output;

use std::ffi::OsString;

use clap::Parser;

pub use config::{parse_config, ConfigError, ExperimentConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] mvjump_core::Error),
    #[error("{0}")]
    Input(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    /// The table was written but the diagnostic it reports did not pass.
    #[error("diagnostic failed: {0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Input(_) => 2,
            CliError::Core(mvjump_core::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match commands::Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("mvjump: {e}");
            e.exit_code()
        }
    }
}
