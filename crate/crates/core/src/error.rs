use std::path::PathBuf;

use crate::objectives::LossBreakdown;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("tensor of shape {shape:?} needs {expected} values, got {actual}")]
    ValueCount {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: empty sequence")]
    EmptySequence { op: &'static str },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalar { shape: Vec<usize> },

    #[error("function is not deterministic: two evaluations gave {first} and {second}")]
    Determinism { first: f64, second: f64 },

    #[error("contrastive loss needs at least 2 samples per batch, got {0}")]
    ContrastiveBatch(usize),

    #[error("label {label} at row {row} is not a valid class index (classes: {classes})")]
    InvalidLabel {
        row: usize,
        label: usize,
        classes: usize,
    },

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("corruption proportion {0} is outside [0, 1]")]
    Proportion(f64),

    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("truncated file at byte offset {offset}: {message}")]
    Truncated { offset: u64, message: String },

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    Divergence {
        epoch: usize,
        step: usize,
        last_finite: Option<Box<LossBreakdown>>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
