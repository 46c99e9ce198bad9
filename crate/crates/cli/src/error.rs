use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error(transparent)]
    Engine(ergwalk::Error),

    #[error("cannot write {path}: {source}")]
    Output { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Divergence(_) => 4,
            CliError::Engine(_) | CliError::Output { .. } => 1,
        }
    }
}

impl From<ergwalk::Error> for CliError {
    fn from(e: ergwalk::Error) -> Self {
        match e {
            ergwalk::Error::Config(msg) => CliError::Config(msg),
            ergwalk::Error::DegenerateSite { .. } => CliError::Config(e.to_string()),
            e if e.is_numerical_divergence() => CliError::Divergence(e.to_string()),
            e => CliError::Engine(e),
        }
    }
}
