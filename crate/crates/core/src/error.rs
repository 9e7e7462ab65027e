use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss is detached from the tape: no input requires grad")]
    Detached,

    #[error("sequence too short for {op}: length {len}, need at least {min}")]
    SequenceTooShort {
        op: &'static str,
        len: usize,
        min: usize,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing input for branch `{0}`")]
    MissingBranch(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),

    #[error("{path}: missing columns {missing:?}")]
    MissingColumns { path: PathBuf, missing: Vec<String> },

    #[error("{path}: malformed number {value:?} at row {row}, column `{column}`")]
    MalformedNumber {
        path: PathBuf,
        row: usize,
        column: String,
        value: String,
    },

    #[error("{0}: no frames")]
    NoFrames(PathBuf),

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("subject {subject}: {source}")]
    Subject {
        subject: String,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged at epoch {0}: non-finite loss")]
    Diverged(usize),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("{path}: {source}")]
    Toml {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_subject(self, subject: &str) -> Self {
        Error::Subject {
            subject: subject.to_string(),
            source: Box::new(self),
        }
    }
}
