use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] msad_core::Error),

    #[error("cannot read config {path}: {detail}")]
    ConfigFile { path: PathBuf, detail: String },

    #[error("override `{0}`: {1}")]
    Override(String, String),

    #[error("{0}")]
    Usage(String),
}

impl CliError {
    /// 1 for contract and validation failures, 2 for I/O and parse failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_io_or_parse() => 2,
            CliError::ConfigFile { .. } => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
