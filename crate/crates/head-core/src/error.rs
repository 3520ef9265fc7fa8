//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by any operation in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Vector or matrix dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An index (label, layer, component) is out of its valid range.
    #[error("index out of range: {0}")]
    Index(String),

    /// A precondition on argument values was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Input data cannot support the requested computation (too few rows,
    /// non-finite entries, mismatched norms, ...).
    #[error("degenerate data: {0}")]
    DegenerateData(String),

    /// An iterative numeric routine failed to converge.
    #[error("no convergence after {iterations} iterations ({what}), residual {residual:e}")]
    Convergence {
        what: String,
        iterations: usize,
        residual: f64,
    },

    /// A file did not match its on-disk format.
    #[error("format error: {0}")]
    Format(String),

    /// Configuration file or value problem.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A pipeline stage failed; wraps the underlying error with the stage name.
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Extension for attaching a stage name to any fallible pipeline step.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
