//! Experiment runner and persistence for function encoders.

use std::path::{Path, PathBuf};

use thiserror::Error;

pub mod commands;
pub mod config;
pub mod model_file;
pub mod output;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Schema(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    ModelFile {
        path: PathBuf,
        #[source]
        source: model_file::ModelFileError,
    },
    #[error("bad input: {0}")]
    Input(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Io { .. } | CliError::ModelFile { .. } | CliError::Input(_) => 4,
            CliError::Failed(_) => 1,
        }
    }
}
