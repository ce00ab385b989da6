use thiserror::Error;

/// Unified error type for the whole crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes for an operation; both shapes reported.
    #[error("{op}: dimension mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A masked reduction was asked to pool over zero rows.
    #[error("empty pool: mask selects no rows")]
    EmptyPool,

    /// Checked mode found a NaN or infinity in an op output.
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    /// A text input could not be parsed; the offending line is named.
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// A binary or structured file does not match its format contract.
    #[error("format error: {0}")]
    Format(String),

    /// A checkpoint could not be loaded into the requested model.
    #[error("load error: {0}")]
    Load(String),

    /// Bad key, value, or section in a run configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
