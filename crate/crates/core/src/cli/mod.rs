//! Command-line front end. `run` parses, echoes the resolved config into the
//! output directory, dispatches and maps failures to stable exit codes.

mod commands;
mod config;

pub use config::{parse_args, AugmentKind, Command, KeySpec, RunConfig, KEYS};

use crate::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_FORMAT: i32 = 4;
pub const EXIT_DATA: i32 = 5;

pub const EXIT_CODES_HELP: &str = "Exit codes: 0 success, 1 other failure, 2 invalid configuration, \
3 file system error, 4 malformed or foreign file, 5 unusable data";

pub const CONFIG_ECHO: &str = "config.txt";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Lib(#[from] Error),
    #[error("{0}")]
    Clap(clap::Error),
}

impl CliError {
    pub fn message(&self) -> String {
        self.to_string()
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io(_) => EXIT_IO,
            CliError::Data(_) => EXIT_DATA,
            CliError::Clap(e) => {
                if e.use_stderr() {
                    EXIT_CONFIG
                } else {
                    EXIT_OK
                }
            }
            CliError::Lib(e) => match e {
                Error::Io { .. } => EXIT_IO,
                Error::InvalidArgument(_) => EXIT_CONFIG,
                Error::Shape(_)
                | Error::DType { .. }
                | Error::QParamsMismatch(_)
                | Error::MissingStats(_)
                | Error::Empty(_) => EXIT_DATA,
                e if e.is_format_error() => EXIT_FORMAT,
                _ => EXIT_OTHER,
            },
        }
    }
}

/// Full CLI run; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let result = parse_args(argv).and_then(|cfg| execute(&cfg));
    match result {
        Ok(()) => EXIT_OK,
        Err(CliError::Clap(e)) => {
            let _ = e.print();
            CliError::Clap(e).exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Echoes the config and runs the command.
pub fn execute(cfg: &RunConfig) -> Result<(), CliError> {
    let out = commands::output_dir(cfg);
    std::fs::create_dir_all(&out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    commands::write_text(&out.join(CONFIG_ECHO), &cfg.to_text())?;
    commands::dispatch(cfg)
}
