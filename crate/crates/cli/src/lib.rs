//! Operator commands behind the `toolweave` and `uplink` binaries.

pub mod config;
pub mod data;
pub mod group;
pub mod run;
pub mod serve;
pub mod tool;

use std::fmt;
use std::process::ExitCode;

/// Exit codes are part of the command-line contract.
pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_ENVIRONMENT: u8 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub exit: u8,
    pub message: String,
}

impl CliError {
    /// Runtime failure: failed run, unknown tool, group or run.
    pub fn failure(message: impl Into<String>) -> Self {
        CliError { exit: EXIT_FAILURE, message: message.into() }
    }

    /// User or configuration error.
    pub fn usage(message: impl Into<String>) -> Self {
        CliError { exit: EXIT_USAGE, message: message.into() }
    }

    /// Environment error: bind failure, unreachable controller, i/o.
    pub fn environment(message: impl Into<String>) -> Self {
        CliError { exit: EXIT_ENVIRONMENT, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T = ()> = Result<T, CliError>;

/// Prints the error (if any) and converts to a process exit code.
pub fn finish(result: CliResult<u8>) -> ExitCode {
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.exit)
        }
    }
}

/// Writes `value` as one JSON document on stdout.
pub fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("json output"));
}

pub fn init_logging(default: &str) {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default)).try_init();
}
