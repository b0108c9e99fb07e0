//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("sequence too short: {bins} non-empty bins (need at least 2)")]
    SequenceTooShort { bins: usize },

    #[error("feature {feature} is constant in the training data (zero standard deviation)")]
    ConstantFeature { feature: usize },

    #[error("time IQR is zero; cannot normalize timestamps")]
    ZeroTimeIqr,

    #[error("drift matrix is unstable; eigenvalues (re, im): {eigenvalues}")]
    UnstableDrift { eigenvalues: String },

    #[error("drift matrix is singular but the bias vector is nonzero")]
    SingularDrift,

    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },

    #[error("no supervision: every target cell is missing")]
    NoSupervision,

    #[error("cache does not match parameters: {0}")]
    CacheMismatch(&'static str),

    #[error("non-finite loss at epoch {epoch}; training diverged")]
    Diverged { epoch: usize },

    #[error("non-finite optimizer update for {tensor}")]
    NonFiniteUpdate { tensor: &'static str },

    #[error("csv parse error at line {line}: {message}")]
    CsvParse { line: usize, message: String },

    #[error("{0}")]
    InvalidInput(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
