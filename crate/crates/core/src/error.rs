use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("token grid {h}x{w} does not cover {tokens} spatial tokens")]
    Grid { h: usize, w: usize, tokens: usize },
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Length { expected: usize, found: usize },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("checkpoint incompatible with model: {}", .0.join("; "))]
    Compatibility(Vec<String>),
    #[error("degenerate ERF map: accumulated contribution is identically zero")]
    DegenerateErf,
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
