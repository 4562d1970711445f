use std::fmt;
use std::io;

/// Error type shared by every module in the crate.
#[derive(Debug)]
pub enum DidError {
    /// Invalid configuration, arguments, or contract violations at call sites.
    Config(String),
    /// Malformed manifests, datasets, or samples.
    Data(String),
    /// Non-finite losses or other numeric failures during training.
    Numeric(String),
    /// Corrupt or truncated on-disk artifacts (checkpoints, images).
    Corrupt(String),
    /// Underlying I/O failure with context.
    Io { context: String, source: io::Error },
}

impl DidError {
    pub fn io(context: impl Into<String>, source: io::Error) -> Self {
        DidError::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 usage/config, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            DidError::Config(_) | DidError::Data(_) => 2,
            DidError::Numeric(_) => 3,
            DidError::Corrupt(_) | DidError::Io { .. } => 4,
        }
    }
}

impl fmt::Display for DidError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DidError::Config(msg) => write!(f, "config error: {msg}"),
            DidError::Data(msg) => write!(f, "data error: {msg}"),
            DidError::Numeric(msg) => write!(f, "numeric error: {msg}"),
            DidError::Corrupt(msg) => write!(f, "corrupt artifact: {msg}"),
            DidError::Io { context, source } => write!(f, "i/o error: {context}: {source}"),
        }
    }
}

impl std::error::Error for DidError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            DidError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, DidError>;
