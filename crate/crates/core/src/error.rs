use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, plans, orders or configs that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    /// Labels or samples outside their valid range.
    #[error("data error: {0}")]
    Data(String),

    /// API called in the wrong sequence, e.g. backward before forward.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("batch norm needs at least 2 values per feature in train mode, got {0}")]
    DegenerateVariance(usize),

    #[error("IDX parse error at byte {offset}: {reason}")]
    Idx { offset: usize, reason: String },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
