//! Command-line pipeline: `parse`, `windows`, `synth`, `train`, `eval`.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data or contract errors.

pub mod checkpoint;
pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;

use clap::Parser;

pub use config::{default_config, RunConfig};

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    /// Bad flags, config keys or values.
    Usage(String),
    /// Unreadable, malformed or mismatched inputs.
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<logpeft::Error> for CliError {
    fn from(e: logpeft::Error) -> Self {
        match e {
            logpeft::Error::Argument(_) | logpeft::Error::UnknownTarget(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

/// Runs one command; `args` includes the program name.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    if args.len() <= 1 {
        eprintln!("{}", commands::usage());
        return 1;
    }
    let cli = match commands::Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
