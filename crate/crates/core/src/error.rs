use std::fmt;

use thiserror::Error;

/// Broad error families. The CLI maps each onto an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Io,
    Format,
    Shape,
    Config,
    Numeric,
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ErrorCategory::Io => "io",
            ErrorCategory::Format => "format",
            ErrorCategory::Shape => "shape",
            ErrorCategory::Config => "config",
            ErrorCategory::Numeric => "numeric",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument to {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("archive entry `{0}` does not match any model parameter")]
    UnknownName(String),

    #[error("model parameter `{0}` missing from archive")]
    MissingName(String),

    #[error("duplicate archive entry `{0}`")]
    DuplicateName(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape {
            op,
            msg: msg.into(),
        }
    }

    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Io(_) => ErrorCategory::Io,
            Error::Format(_)
            | Error::Truncated(_)
            | Error::UnknownName(_)
            | Error::MissingName(_)
            | Error::DuplicateName(_) => ErrorCategory::Format,
            Error::Shape { .. } | Error::LabelOutOfRange { .. } => ErrorCategory::Shape,
            Error::InvalidArgument { .. } | Error::Config(_) => ErrorCategory::Config,
            Error::NonFinite { .. } => ErrorCategory::Numeric,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
