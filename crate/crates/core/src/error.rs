use std::io;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("input is empty after trimming")]
    EmptyInput,

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),

    #[error("every candidate position is masked")]
    DeadEnd,

    #[error("beam search finished no hypothesis")]
    SearchExhausted,

    #[error("sequence length {len} exceeds model maximum {max}")]
    LengthExceeded { len: usize, max: usize },

    #[error("non-finite loss on example {example}")]
    NumericalDivergence { example: usize },

    #[error("corpus {path} rejected: {malformed} of {total} lines malformed")]
    CorpusRejected {
        path: PathBuf,
        malformed: usize,
        total: usize,
    },

    #[error("training plan: {0}")]
    Plan(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input or configuration rather than
    /// a failure while doing the work. The CLI maps these to exit code 2.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Plan(_) | Error::EmptyInput | Error::InvalidVocab(_)
        )
    }
}
