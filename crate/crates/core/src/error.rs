use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{0}")]
    Invalid(String),

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("data error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// True for errors caused by bad configuration or arguments rather than by
    /// input data or the filesystem.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::Invalid(_) | Error::Shape { .. })
    }
}
