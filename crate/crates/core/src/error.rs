use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed or unsupported file content.
    #[error("format error: {0}")]
    Format(String),

    /// A caller passed values outside an operation's domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Shapes of two inputs that must agree do not.
    #[error("shape mismatch: {left} vs {right}")]
    ShapeMismatch { left: String, right: String },

    /// Missing or inconsistent configuration / dataset.
    #[error("configuration error: {0}")]
    Config(String),

    /// The synthetic generator could not satisfy its constraints.
    #[error("generation error: {0}")]
    Generation(String),

    /// NaN/inf during a forward or backward pass, or a failed gradient check.
    #[error("numerical error: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
