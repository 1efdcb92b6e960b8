//! Experiment orchestration: config files, checkpoints, result tables, run
//! variants, sweeps and the gradient-check command.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod results;
pub mod runner;

/// CLI-level error with an exit-code category.
#[derive(Debug)]
pub enum CliError {
    /// Configuration parse or validation failure (exit code 2).
    Config(String),
    /// File I/O or format failure (exit code 3).
    Io(String),
    /// Numerical or training failure (exit code 4).
    Run(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
            CliError::Run(m) => write!(f, "run error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Run(_) => 4,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<ncal_core::Error> for CliError {
    fn from(e: ncal_core::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
