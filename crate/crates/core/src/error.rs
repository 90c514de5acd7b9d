use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced anywhere in the library.
///
/// [`Error::kind`] groups them into the coarse categories the CLI maps onto
/// exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed csv in {path}: {message}")]
    Csv { path: PathBuf, message: String },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("ragged row {row}: expected {expected} columns, found {found}")]
    RaggedRow { row: usize, expected: usize, found: usize },
    #[error("non-numeric cell {value:?} at ({row},{column})")]
    NonNumeric { row: usize, column: usize, value: String },
    #[error("label {value:?} at row {row} is not 0 or 1")]
    BadLabel { row: usize, value: String },
    #[error("dataset needs at least 2 columns, found {0}")]
    TooFewColumns(usize),
    #[error("unknown column {0:?}")]
    UnknownColumn(String),
    #[error("missing feature columns: {}", .0.join(", "))]
    MissingColumns(Vec<String>),
    #[error("column {0} has no non-zero entries to impute from")]
    AllMissing(String),
    #[error("class {label} has {count} members, need at least {required}")]
    ClassTooSmall { label: u8, count: usize, required: usize },
    #[error("cannot build {folds} folds: minority class has only {minority} members")]
    TooManyFolds { folds: usize, minority: usize },
    #[error("training data contains a single class")]
    SingleClass,
    #[error("non-finite feature value at row {row}, column {column}")]
    NonFinite { row: usize, column: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite loss at sample {0}")]
    NonFiniteLoss(usize),
    #[error("ensemble weights sum to {0}, expected 1")]
    WeightSum(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unsupported model document: {0}")]
    Format(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse error classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Usage,
            Error::NonFiniteLoss(_) | Error::WeightSum(_) => ErrorKind::Numeric,
            Error::SingleClass => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
