use std::io;

use thiserror::Error;

use splitinfer_core::attacks::AttackError;
use splitinfer_core::data::DataError;
use splitinfer_core::metrics::MetricsError;
use splitinfer_core::network::{ModelFileError, NetworkError};
use splitinfer_core::splitexec::SplitError;
use splitinfer_wire::WireError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("MNIST not found; set SPLITINFER_DATA_DIR or data.dir (looked in {0})")]
    DataMissing(String),
    #[error("training diverged in epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("protocol: {0}")]
    Wire(#[from] WireError),
    #[error("model file: {0}")]
    ModelFile(#[from] ModelFileError),
    #[error(transparent)]
    Network(NetworkError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
    #[error("{0}")]
    Usage(String),
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        match e {
            NetworkError::Diverged { epoch, loss } => CliError::Diverged { epoch, loss },
            other => CliError::Network(other),
        }
    }
}

impl CliError {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(context: impl Into<String>, source: io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }

    /// The offending key of a config error.
    #[cfg(test)]
    pub fn key(&self) -> Option<&str> {
        match self {
            CliError::Config { key, .. } => Some(key),
            _ => None,
        }
    }

    /// 2 data, 3 divergence, 4 config, 5 protocol, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Data(_) | CliError::DataMissing(_) => 2,
            CliError::Diverged { .. } => 3,
            CliError::Config { .. } | CliError::Usage(_) => 4,
            CliError::Wire(_) => 5,
            _ => 1,
        }
    }
}
