use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped so callers (notably the CLI) can map them onto exit
/// codes: configuration and data problems are caller mistakes, the rest are
/// runtime failures.
#[derive(Debug, Error)]
pub enum Error {
    /// Input file does not match the expected schema (missing column, bad header).
    #[error("schema error: {0}")]
    Schema(String),

    /// Input data violates an invariant (duplicate timestamp, non-finite value).
    #[error("data error: {0}")]
    Data(String),

    /// Inconsistent or unusable configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Vector/matrix dimensions do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A numeric operation failed (non-finite intermediate, singular system).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Market VWAP is undefined because total volume over the horizon is zero.
    #[error("market VWAP undefined: total traded volume is zero")]
    UndefinedVwap,

    /// Volume-curve target is undefined because its normalizer is zero.
    #[error("volume-curve target undefined: zero normalizing volume")]
    UndefinedTarget,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Whether the error is the caller's fault (bad config or bad data).
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Schema(_) | Error::Data(_) | Error::Config(_))
    }

    /// Process exit code convention: 2 for configuration/data errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.is_usage() {
            2
        } else {
            1
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
