use std::path::PathBuf;

/// Errors produced by the numeric core and its file formats.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupt data: {0}")]
    Corruption(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("coverage error: {0}")]
    Coverage(String),
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (files, configs, specs) as
    /// opposed to failures during a computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Format(_)
                | Error::Corruption(_)
                | Error::Unsupported(_)
                | Error::Invariant(_)
                | Error::Validation(_)
                | Error::Parse(_)
                | Error::Spec(_)
                | Error::Precondition(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
