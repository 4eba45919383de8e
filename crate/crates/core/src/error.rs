use std::io;

use thiserror::Error;

/// Errors produced by the sbmt library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("inconsistent state: {0}")]
    Consistency(String),

    #[error("unavailable: {0}")]
    Unavailable(String),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("invalid value for config key `{key}`: {value}")]
    InvalidValue { key: String, value: String },

    #[error("non-finite loss at step {step}: {diagnostic}")]
    NonFinite { step: u64, diagnostic: String },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Result<T> {
    Err(Error::Shape { op, lhs, rhs })
}
