use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to decode {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("{0} is undefined on an empty set")]
    EmptySet(&'static str),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("synthetic scene with seed {seed}: could not place {num_objects} objects without overlap")]
    Placement { seed: u64, num_objects: usize },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
