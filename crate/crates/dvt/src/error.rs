use std::path::PathBuf;

/// Crate-wide error type. Variants are grouped by how the CLI maps them to
/// exit codes: config/usage problems, numerical failures, and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An op produced (or was handed) a NaN or infinity. Ops check their
    /// outputs so the failure surfaces where it happens, not steps later.
    #[error("non-finite value in {op}: {detail}")]
    NonFinite { op: &'static str, detail: String },

    #[error("{0}")]
    Invalid(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("verification failed: {0}")]
    Verify(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI: 1 usage/config, 2 numerical, 3 I/O.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Shape { .. } | Error::Invalid(_) | Error::Config(_) => 1,
            Error::NonFinite { .. } | Error::Verify(_) => 2,
            Error::Data(_) | Error::Io { .. } | Error::Json(_) => 3,
        }
    }
}
