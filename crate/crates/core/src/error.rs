use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: cannot decode image: {message}", path.display())]
    ImageDecode { path: PathBuf, message: String },

    #[error("bad tensor file magic {found:?} (expected \"DRTF\")")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported tensor file version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("truncated tensor file: expected {expected} payload bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("time {t} outside schedule bounds [{lo}, {hi}]")]
    TimeOutOfRange { t: f64, lo: f64, hi: f64 },

    #[error("input contains non-finite values")]
    NonFiniteInput,

    #[error("non-finite state at step {step} (t = {t})")]
    NonFiniteState { step: usize, t: f64 },

    #[error("no embedding for id {0:?}")]
    MissingEmbedding(String),

    #[error("descriptor has zero norm")]
    ZeroNormDescriptor,

    #[error("sample sets {a:?} and {b:?} share no noise ids")]
    NoMatchedPairs { a: String, b: String },

    #[error("sample sets {a:?} and {b:?} differ in noise ids ({only_a} only in {a:?}, {only_b} only in {b:?})")]
    MismatchedIds {
        a: String,
        b: String,
        only_a: usize,
        only_b: usize,
    },

    #[error("sample set {0:?} has no class labels")]
    MissingLabels(String),

    #[error("empty input: {0}")]
    Empty(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical core (as opposed to bad input or
    /// configuration).
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFiniteState { .. } | Error::NonFiniteInput)
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
