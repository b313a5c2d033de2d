use thiserror::Error;

/// Errors produced by the decomposition library.
#[derive(Error, Debug)]
pub enum MdtdError {
    #[error("invalid mode {0}, expected 1, 2 or 3")]
    InvalidMode(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("rank mismatch: {0}")]
    RankMismatch(String),

    #[error("index ({i}, {j}, {t}) out of range for dims {dims:?}")]
    IndexOutOfRange {
        i: usize,
        j: usize,
        t: usize,
        dims: [usize; 3],
    },

    #[error("duplicate entry at ({0}, {1}, {2})")]
    DuplicateEntry(usize, usize, usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("division by zero: {0}")]
    DivisionByZero(&'static str),

    #[error("linear algebra failure: {0}")]
    Numerical(String),

    #[error("objective became non-finite at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("missing index ({0}, {1}, {2}) overlaps an observed entry")]
    MaskOverlap(usize, usize, usize),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MdtdError>;
