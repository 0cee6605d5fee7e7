use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or graph shape rule violated.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },

    /// Invalid configuration value or combination.
    #[error("invalid config: {0}")]
    Config(String),

    /// Training aborted because the loss left the finite range.
    #[error("numerical abort at round {round}: {detail}")]
    Numerical { round: usize, detail: String },

    /// Malformed binary file; offset is the byte position of the problem.
    #[error("malformed file {path} at byte {offset}: {detail}")]
    Format {
        path: String,
        offset: u64,
        detail: String,
    },

    /// Operation applied to an unsupported model family.
    #[error("unsupported model: {0}")]
    Model(String),

    /// Gradient collection with zero norm where a direction is required.
    #[error("zero-norm gradient collection: {0}")]
    ZeroNorm(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(context: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
