use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// The variants split along the CLI's exit-code contract: `Parse`,
/// `Validation`, `Structure` and `Precondition` are input problems (exit 1);
/// the rest are runtime or numeric failures (exit 2).
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("structural error in {op}: {message}")]
    Structure { op: &'static str, message: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("row {row}: column `{column}` has unknown categorical code `{value}`")]
    UnknownCategory {
        row: usize,
        column: String,
        value: String,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("non-finite activation in layer {layer} ({stage})")]
    NonFiniteActivation { layer: usize, stage: &'static str },

    #[error("embedding provider `{provider}` failed (status {status:?}): {message}")]
    Provider {
        provider: String,
        status: Option<u16>,
        message: String,
    },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("leakage guard tripped: {0}")]
    Leakage(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }

    pub fn structure(op: &'static str, message: impl Into<String>) -> Self {
        Error::Structure {
            op,
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a failed computation.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Validation(_)
                | Error::Structure { .. }
                | Error::Precondition(_)
                | Error::UnknownCategory { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
