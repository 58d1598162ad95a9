//! Error types and their exit codes.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("cannot read config {path}: {msg}", path = .path.display())]
    Read { path: PathBuf, msg: String },
    #[error("config parse error in {0}")]
    Parse(String),
    #[error("invalid config field `{field}`: {msg}")]
    Invalid { field: String, msg: String },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("artifact {path} already exists; pass --force to overwrite", path = .0.display())]
    Exists(PathBuf),
    #[error("assumption check failed: {0}")]
    Assumption(String),
    #[error("run aborted: {0}")]
    Runtime(String),
    #[error("cannot write {path}: {source}", path = .path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    /// 2 for configuration and usage errors, 3 for failed model assumptions,
    /// 4 for aborted runs.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Exists(_) => 2,
            CliError::Assumption(_) => 3,
            CliError::Runtime(_) | CliError::Io { .. } => 4,
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}

runtime_from!(critrec_core::measure::MeasureError, critrec_core::constants::ConstantsError, critrec_core::baseline::BaselineError);
