use std::path::PathBuf;

use thiserror::Error;

use crate::tkg::Quadruple;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },

    #[error("row {row}: date {date} outside declared range {start}..={end}")]
    DateOutOfRange {
        row: usize,
        date: String,
        start: String,
        end: String,
    },

    #[error("{} fact(s) outside split range, first: {:?}", offenders.len(), offenders.first())]
    OutsideSplit { offenders: Vec<Quadruple> },

    #[error("invalid split boundaries: {0}")]
    InvalidBoundaries(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("cannot split odd-length vector of length {0} into complex halves")]
    OddLength(usize),

    #[error("{kind} id {id} out of range (size {bound})")]
    IdOutOfRange {
        kind: &'static str,
        id: usize,
        bound: usize,
    },

    #[error("embedding table has no timestamp embeddings")]
    MissingTimestampTable,

    #[error(
        "leakage guard: fact at timestamp {fact_t} visible when inferring timestamp {query_t}"
    )]
    Leakage { fact_t: u32, query_t: u32 },

    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    Divergence {
        epoch: usize,
        step: usize,
        loss: f64,
    },

    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("missing artifact {}; run `tkgqa {producer}` first", path.display())]
    MissingArtifact {
        path: PathBuf,
        producer: &'static str,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("question {id}: {reason}")]
    Question { id: String, reason: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// Process exit code: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::InvalidBoundaries(_) | Error::MissingArtifact { .. } => 2,
            Error::Divergence { .. } => 4,
            _ => 3,
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimMismatch { expected, got });
    }
    Ok(())
}
