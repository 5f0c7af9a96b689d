use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("zero vector cannot be normalized")]
    ZeroVector,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("need at least 2 identities, found {found}")]
    InsufficientIdentities { found: usize },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("non-finite value in network input")]
    NonFiniteInput,

    #[error("unsupported checkpoint format: {0}")]
    FormatVersionMismatch(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("episode already terminated")]
    SteppedTerminalEpisode,

    #[error("no identity has two tracks; cannot draw positive pairs")]
    NoPositivePairAvailable,

    #[error("query track {0} has no matching gallery track")]
    QueryWithoutMatch(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("dataset carries no corruption metadata")]
    MissingMetadata,

    #[error("history weights sum to zero")]
    AllWeightsZero,

    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) => 2,
            Error::NonFiniteInput | Error::Numeric(_) | Error::AllWeightsZero => 4,
            _ => 3,
        }
    }
}
