use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum NclError {
    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error")]
    Csv(#[from] csv::Error),

    #[error("JSON error")]
    Json(#[from] serde_json::Error),

    #[error("column `{column}` row {row}: non-numeric cell `{value}`")]
    NonNumeric {
        column: String,
        row: usize,
        value: String,
    },

    #[error("column `{column}` row {row}: non-finite value")]
    NonFinite { column: String, row: usize },

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("column index {index} out of range for {ncols} columns")]
    ColumnIndex { index: usize, ncols: usize },

    #[error("target selection is empty")]
    EmptySelection,

    #[error("column `{0}` selected more than once")]
    DuplicateSelection(String),

    #[error("constant column `{0}` cannot be standardized")]
    ConstantColumn(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("lambda {0} outside [0, 1]")]
    LambdaOutOfRange(f64),

    #[error("diagonal gram block of member {member} is rank deficient (min eigenvalue {min_eigenvalue:e})")]
    RankDeficientBlock { member: usize, min_eigenvalue: f64 },

    #[error("all points identical: median pairwise distance is zero")]
    DegeneratePoints,

    #[error("noise variance needs N > H (N = {n}, H = {h})")]
    TooFewSamples { n: usize, h: usize },

    #[error("smoother matrix guard: N = {n} exceeds {limit}")]
    SmootherTooLarge { n: usize, limit: usize },

    #[error("fold {fold} has {n} training samples, needs more than H = {h}")]
    FoldTooSmall { fold: usize, n: usize, h: usize },

    #[error("grid must be ascending within [0, 1]")]
    UnsortedGrid,

    #[error("estimator failed on repeat {repeat}")]
    Oracle {
        repeat: usize,
        #[source]
        source: Box<NclError>,
    },
}

pub type Result<T, E = NclError> = std::result::Result<T, E>;

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(NclError::LambdaOutOfRange(lambda))
    }
}
