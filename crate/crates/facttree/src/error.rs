use std::path::{Path, PathBuf};

/// Failures of the file layer and the command line. Every variant maps to an
/// exit code: configuration problems give 1, bad input data gives 2.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("data error: {0}")]
    Data(String),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Io { .. } | Error::Parse { .. } | Error::Data(_) => 2,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn parse(path: &Path, line: usize, msg: impl ToString) -> Self {
        Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: msg.to_string(),
        }
    }

    pub fn config(msg: impl ToString) -> Self {
        Error::Config(msg.to_string())
    }

    pub fn data(msg: impl ToString) -> Self {
        Error::Data(msg.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
