use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("model produced a non-finite output")]
    ModelCorrupt,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("episode {episode} has {len} steps; at least 2 are required")]
    EpisodeTooShort { episode: usize, len: usize },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("model file checksum mismatch")]
    Checksum,

    #[error("model shape mismatch: {0}")]
    Shape(String),

    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },

    #[error("collection failed: {successes} successful episodes out of {attempts} attempts (need {needed}); the environment or teacher is likely miscalibrated")]
    CollectionFailed {
        successes: usize,
        attempts: usize,
        needed: usize,
    },

    #[error("cannot step an environment that is not running")]
    NotRunning,

    #[error("missing reference: {0}")]
    MissingReference(&'static str),

    #[error("{path}: {source}")]
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
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
