//! Experiment runner: config files, dataset preparation, the training grid,
//! the quarter-turn accuracy analysis and report tables.

pub mod analyze;
pub mod config;
pub mod datasets;
pub mod generate;
pub mod grid;
pub mod report;
pub mod selftest;
pub mod surrogate;

use rotens::data::DataError;
use rotens::model::ModelError;
use rotens::train::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric divergence: {0}")]
    Divergence(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    pub(crate) fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Other(format!("{}: {e}", path.display()))
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Config(m),
            TrainError::Data(d) => d.into(),
            e @ TrainError::Divergence { .. } => CliError::Divergence(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Writes `bytes` to `path`, creating parent directories.
pub(crate) fn write_file(path: &std::path::Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}
