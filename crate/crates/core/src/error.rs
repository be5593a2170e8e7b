// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left_rows}x{left_cols} vs {right_rows}x{right_cols}")]
    Shape {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("length mismatch in {op}: {left} vs {right}")]
    Length {
        op: &'static str,
        left: usize,
        right: usize,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("non-finite value at sublayer {sublayer} ({stage})")]
    Numeric { sublayer: usize, stage: &'static str },

    #[error("{what} out of range at position {position}: {value} (bound {bound})")]
    Index {
        what: &'static str,
        position: usize,
        value: usize,
        bound: usize,
    },

    #[error("sublayer cut {cut} beyond trace depth {depth}")]
    CutRange { cut: usize, depth: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("no bank entry for lemma {0}")]
    Coverage(usize),

    #[error("checkpoint load error ({tensor}) at byte {byte}: {message}")]
    Load {
        tensor: String,
        byte: u64,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
