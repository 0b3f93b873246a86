use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("division by zero in {op}")]
    DivisionByZero { op: &'static str },

    #[error("domain error: {op} of {value}")]
    Domain { op: &'static str, value: f64 },

    #[error("vector norm {norm:e} is at or below the 1e-12 floor")]
    NearZeroNorm { norm: f64 },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid config field `{field}`: {msg}")]
    InvalidConfig { field: String, msg: String },

    #[error("label {label} outside [{lo}, {hi}]")]
    LabelOutOfRange { label: i64, lo: i64, hi: i64 },

    #[error("label set is empty")]
    EmptyLabels,

    #[error("age {age} is below the group origin {origin}")]
    AgeBelowOrigin { age: i64, origin: i64 },

    #[error("equal labels have no order relation")]
    EqualRelation,

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("length mismatch in {what}: {left} vs {right}")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("no gradient for parameter #{0}")]
    MissingGradient(usize),

    #[error("identity {id} is not produced by this generator (n_identities = {n})")]
    UnknownIdentity { id: usize, n: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("{path}: line {line}: {msg}")]
    Malformed {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("non-finite loss at epoch {epoch}")]
    NumericalFailure { epoch: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            msg: msg.into(),
        }
    }
}
