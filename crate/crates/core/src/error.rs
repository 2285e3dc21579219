use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::GraphError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse error classes, used by the CLI to pick exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorCategory {
    Io,
    Invariant,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid encoder spec: {0}")]
    BadSpec(String),
    #[error("encoder specs differ: {0}")]
    SpecMismatch(String),
    #[error("input width {got} does not match encoder input_dim {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("degenerate embedding: {count} row(s) with norm below 1e-8 (first row {first})")]
    DegenerateEmbedding { count: usize, first: usize },
    #[error("row {row} has norm {norm}, expected unit norm")]
    NotUnitNorm { row: usize, norm: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("memory bank: {0}")]
    Bank(String),
    #[error("memory bank is empty")]
    EmptyBank,
    #[error("bag table: {0}")]
    Bags(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("non-finite gradient in parameter tensor {tensor} at index {index}")]
    NonFiniteGradient { tensor: usize, index: usize },
    #[error("labels: {0}")]
    Labels(String),
    #[error("fraction {fraction} leaves classes without labeled examples: {classes:?}")]
    UncoveredClasses { fraction: f64, classes: Vec<u32> },
    #[error("{0}")]
    Format(#[from] crate::data::FormatError),
    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Io { .. } => ErrorCategory::Io,
            Error::Graph(GraphError::NonFinite { .. })
            | Error::DegenerateEmbedding { .. }
            | Error::NonFiniteLoss { .. }
            | Error::NonFiniteGradient { .. } => ErrorCategory::Numeric,
            Error::Format(crate::data::FormatError::Io(_)) => ErrorCategory::Io,
            _ => ErrorCategory::Invariant,
        }
    }
}
