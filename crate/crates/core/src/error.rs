use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("budget error: {0}")]
    Budget(String),

    #[error("pool consistency error: {0}")]
    Consistency(String),

    #[error("no training signal: {0}")]
    NoSignal(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("non-deterministic loss function: {0}")]
    Determinism(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Stable short code used by the CLI and the C bindings.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Numeric(_) => "numeric",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Budget(_) => "budget",
            Error::Consistency(_) => "consistency",
            Error::NoSignal(_) => "no_signal",
            Error::Lookup(_) => "lookup",
            Error::Determinism(_) => "determinism",
            Error::Format(_) => "format",
            Error::Version { .. } => "version",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Context { source, .. } => source.kind(),
        }
    }
}
