use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A vector with zero norm reached an operation that needs a direction.
    #[error("zero-norm vector in {context}")]
    ZeroNorm { context: &'static str },

    /// Vector/matrix dimensions do not line up.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A hyperparameter or config field is out of its valid range.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A class id was used where it is not known (wrong vocabulary, missing queue).
    #[error("unknown class {class} in {context}")]
    UnknownClass { class: usize, context: &'static str },

    /// A computation produced NaN or infinity.
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },

    /// The text encoder collapsed a class prompt to the zero vector.
    #[error("degenerate encoding for class {class}")]
    DegenerateEncoding { class: usize },

    /// Training diverged (non-finite loss).
    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: &'static str },

    /// A required artifact file is missing.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    /// An evaluation was asked to run on an empty test set.
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {path}: {message}")]
    Parse { path: String, message: String },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
