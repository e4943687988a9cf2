use std::path::PathBuf;

use divgen_core::{DatasetError, GenerationError, MetricsError, PromptError, SimilarityError, TrainError};
use thiserror::Error;

use crate::executor::ExecuteError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unknown class {0:?}")]
    UnknownClass(String),
    #[error("checksum mismatch for {id}: manifest {expected}, file {found}")]
    ChecksumMismatch {
        id: String,
        expected: String,
        found: String,
    },
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Execute(#[from] ExecuteError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

fn leading_ident(debug: &str) -> &str {
    let end = debug
        .find(|c: char| !(c.is_alphanumeric() || c == '_'))
        .unwrap_or(debug.len());
    &debug[..end]
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// `Module::Variant` style name for error reports, e.g.
    /// `PromptError::CorpusUnderfilled`.
    pub fn name(&self) -> String {
        let inner = |module: &str, debug: String| format!("{module}::{}", leading_ident(&debug));
        match self {
            Error::Similarity(e) => inner("SimilarityError", format!("{e:?}")),
            Error::Prompt(e) => inner("PromptError", format!("{e:?}")),
            Error::Generation(e) => inner("GenerationError", format!("{e:?}")),
            Error::Dataset(e) => inner("DatasetError", format!("{e:?}")),
            Error::Train(e) => inner("TrainError", format!("{e:?}")),
            Error::Metrics(e) => inner("MetricsError", format!("{e:?}")),
            Error::Execute(e) => inner("ExecuteError", format!("{e:?}")),
            other => inner("Error", format!("{other:?}")),
        }
    }
}
