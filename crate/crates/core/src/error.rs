use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("length error: sequence of length {len} exceeds limit {max}")]
    Length { len: usize, max: usize },
    #[error("incompatible models: {0}")]
    Compatibility(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("budget error: {0}")]
    Budget(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("dependency error: {0}")]
    Dependency(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::Lookup(_)
            | Error::Dependency(_)
            | Error::Budget(_)
            | Error::Config(_)
            | Error::Json(_) => 2,
            _ => 3,
        }
    }
}
