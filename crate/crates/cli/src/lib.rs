//! Command-line experiment runner for the `iwvi` estimators.
//!
//! Every subcommand is assembled into an [`config::ExperimentConfig`], validated
//! in one pass and executed into its own output directory with a `manifest.json`.
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod args;
pub mod config;
pub mod runner;

use std::ffi::OsString;

use clap::Parser;

use config::ConfigError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration:\n{}", format_config_errors(.0))]
    Config(Vec<ConfigError>),
    #[error(transparent)]
    Library(#[from] iwvi::Error),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Failed(String),
}

fn format_config_errors(errors: &[ConfigError]) -> String {
    errors.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n")
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

impl From<Vec<ConfigError>> for CliError {
    fn from(errors: Vec<ConfigError>) -> Self {
        CliError::Config(errors)
    }
}

/// Parses `argv` (including the program name), runs the experiment and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match args::Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let outcome = cli.into_experiment().and_then(|exp| runner::execute(&exp).map(|m| (exp, m)));
    match outcome {
        Ok((exp, manifest)) => {
            println!("wrote {} ({} files + manifest.json)", exp.output.display(), manifest.outputs.len());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
