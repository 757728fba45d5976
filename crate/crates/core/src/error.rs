use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension { what: String, expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("manifest error at row {row}, column {column:?}: {message}")]
    Manifest {
        row: usize,
        column: Option<String>,
        message: String,
    },

    #[error("unknown backbone `{0}`")]
    Registry(String),

    #[error("index {index} out of range for split of {len} samples")]
    Range { index: usize, len: usize },

    #[error("class `{0}` has no samples to resample from")]
    EmptyClass(String),

    #[error("image for sample `{sample_id}`: {message}")]
    Image { sample_id: String, message: String },

    #[error("checksum mismatch: store was produced by {expected}, checkpoint is {found}")]
    Checksum { expected: String, found: String },

    #[error("no distillation record for sample `{0}`")]
    MissingRecord(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("{stage} training diverged at epoch {epoch} (loss {loss})")]
    Divergence { stage: String, epoch: usize, loss: f64 },

    #[error("missing artifact {0} (run the upstream stage first)")]
    MissingArtifact(PathBuf),

    #[error("evaluation split is empty")]
    EmptySplit,

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn dim(what: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            what: what.into(),
            expected,
            got,
        }
    }
}
