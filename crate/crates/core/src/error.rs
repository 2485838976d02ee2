use std::io;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// An op received inputs whose shapes do not satisfy its shape rule.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A configuration or argument outside its documented range.
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// A malformed file (checkpoint container, PGM, window list, config).
    #[error("format error: {0}")]
    Format(String),

    /// Training produced a NaN or infinite loss.
    #[error("non-finite loss {value} at step {step}")]
    NonFinite { step: usize, value: f64 },

    /// Brute-force enumeration refused because the count exceeds the guard.
    #[error("enumeration guard exceeded: count would be 10^{log10_count:.4} > {max_count}")]
    GuardExceeded { log10_count: f64, max_count: u64 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// True for errors caused by bad input or configuration rather than by
    /// a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape { .. } | Error::Invalid(_) | Error::Format(_) | Error::GuardExceeded { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
