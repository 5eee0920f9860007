use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the flowsynth pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("empty file: {0}")]
    EmptyFile(PathBuf),
    #[error("row {row} has {found} fields but the header has {expected}")]
    Arity {
        row: usize,
        found: usize,
        expected: usize,
    },
    #[error("all rows dropped ({dropped} unparseable)")]
    AllRowsDropped { dropped: usize },
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("index {index} out of range in {op} (limit {limit})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown feature '{0}'")]
    UnknownFeature(String),
    #[error("feature '{0}' is constant and cannot be binned")]
    ConstantFeature(String),
    #[error("unsupported {what} version: found {found}, expected {expected}")]
    Version {
        what: &'static str,
        found: String,
        expected: String,
    },
    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },
    #[error("not a flowsynth checkpoint")]
    BadMagic,
    #[error("checkpoint CRC mismatch (stored {stored:08x}, computed {computed:08x})")]
    Crc { stored: u32, computed: u32 },
    #[error("backward called twice without zero_grad")]
    BackwardTwice,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
    #[error("one-class SVM did not converge: {0}")]
    NonConvergence(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn malformed(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Malformed {
            what,
            detail: detail.into(),
        }
    }
}
