//! The `funedit` command line: data generation, training, editing,
//! evaluation and serving.

use std::ffi::OsString;
use std::fmt;

use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;

pub use config::RunConfig;

/// Exit status categories: 1 for runtime failures, 2 for usage errors.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<funedit_core::Error> for CliError {
    fn from(e: funedit_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "funedit", version, about = "Mask-localized diffusion editing with composable task tokens")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic atomic-edit dataset.
    GenData(commands::GenDataArgs),
    /// Train a model on a dataset.
    Train(commands::TrainArgs),
    /// Edit one image.
    Edit(commands::EditArgs),
    /// Evaluate a checkpoint and write a JSON report.
    Eval(commands::EvalArgs),
    /// Serve the HTTP editing API.
    Serve(commands::ServeArgs),
    /// Strip optimizer state from a checkpoint.
    Export(commands::ExportArgs),
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Edit(a) => commands::edit(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Serve(a) => commands::serve(&a),
        Command::Export(a) => commands::export(&a),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
