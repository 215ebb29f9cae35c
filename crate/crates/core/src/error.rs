use std::path::PathBuf;

use crate::divergence::Divergence;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("class {class} has a single member; every class needs at least 2")]
    SingletonClass { class: usize },

    #[error("perplexity bisection did not converge for row {row}")]
    BisectionFailed { row: usize },

    #[error("row {row} has zero total cluster overlap with every other point")]
    DegenerateRow { row: usize },

    #[error("non-finite gradient entry in tensor {tensor}")]
    NonFiniteGradient { tensor: usize },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("non-finite loss at step {step} ({divergence})")]
    NonFiniteLoss { step: usize, divergence: Divergence },

    #[error("parse error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse { line: Option<u64>, message: String },

    #[error("malformed binary data: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {}: {source}", path.display())]
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

    /// True for the errors a training run raises when the numbers blow up,
    /// as opposed to bad input or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteLoss { .. }
                | Error::Numerical(_)
                | Error::NonFiniteGradient { .. }
                | Error::BisectionFailed { .. }
                | Error::DegenerateRow { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
