use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),

    #[error("`{path}`: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("`{path}`: {source}")]
    Csv { path: PathBuf, source: csv::Error },

    #[error("`{path}`, line {line}: {msg}")]
    Parse { path: PathBuf, line: u64, msg: String },

    #[error("config `{path}`: {source}")]
    Config {
        path: PathBuf,
        source: toml::de::Error,
    },

    #[error(transparent)]
    Core(#[from] csc_core::Error),

    #[error("cannot serialise output: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status: 1 usage, 2 data, 3 solver.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Usage(_) | Error::Config { .. } => 1,
            Error::Core(csc_core::Error::Solver { .. }) => 3,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}
