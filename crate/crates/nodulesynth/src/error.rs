use std::path::PathBuf;

/// A configuration value that is missing, mistyped or out of range, located
/// by its dotted key path.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("config error at `{key_path}`: {message}")]
pub struct ConfigError {
    pub key_path: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(key_path: impl Into<String>, message: impl ToString) -> Self {
        Self {
            key_path: key_path.into(),
            message: message.to_string(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] nodulesynth_core::Error),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("{}: checksum mismatch (manifest {expected}, file {found})", path.display())]
    Checksum {
        path: PathBuf,
        expected: String,
        found: String,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Self::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
