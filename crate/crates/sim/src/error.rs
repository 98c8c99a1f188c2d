use std::path::PathBuf;

/// Errors of the simulation layer. The split matters for the command-line
/// exit codes: configuration and I/O problems are user errors, everything
/// raised by the numerical kernels is a numerical failure.
#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("config parse error: {0}")]
    Parse(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Numerical(#[from] drekf_core::Error),
}

impl SimError {
    pub fn config(key: impl Into<String>, message: impl std::fmt::Display) -> Self {
        SimError::Config {
            key: key.into(),
            message: message.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SimError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl std::fmt::Display) -> Self {
        SimError::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, SimError::Numerical(_))
    }
}

pub type SimResult<T> = std::result::Result<T, SimError>;
