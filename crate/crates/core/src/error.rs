use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// An invalid network or pipeline configuration, caught before any work.
    #[error("configuration error: {0}")]
    Config(String),
    /// Tensor/batch shape disagreement.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// Dataset content violates its invariants.
    #[error("data error: {0}")]
    Data(String),
    /// A file did not match the documented on-disk format.
    #[error("format error: {0}")]
    Format(String),
    /// An operation precondition was violated.
    #[error("invalid input: {0}")]
    Invalid(String),
    /// A pipeline stage failed; the stage name is recorded.
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn in_stage(self, stage: &str) -> Error {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
