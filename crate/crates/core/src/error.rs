//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by any module of this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape mismatch while recording or evaluating a graph node.
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },

    /// An argument violated an operation's precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A landmark frame is degenerate (all points coincident).
    #[error("rank-deficient frame{}", frame_context(*.frame))]
    RankDeficientFrame { frame: Option<usize> },

    /// A hypergraph node ended up with non-positive degree.
    #[error("isolated node {node}: degree {degree} is not positive")]
    IsolatedNode { node: usize, degree: f64 },

    /// A binary file failed structural validation.
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    /// Underlying I/O failure.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A non-finite value crossed a module boundary.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
}

fn frame_context(frame: Option<usize>) -> String {
    match frame {
        Some(i) => format!(" (frame {i})"),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
