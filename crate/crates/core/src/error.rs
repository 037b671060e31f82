use std::path::PathBuf;

use thiserror::Error;

use crate::datagen::DataGenError;
use crate::flcore::FlError;
use crate::metrics::MetricError;
use crate::partition::PartitionError;
use crate::semantics::SemanticsError;
use crate::trainer::TrainError;

/// Crate-level error.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Federation(#[from] FlError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    DataGen(#[from] DataGenError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {reason}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("config `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("{0}")]
    Pipeline(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
