use std::path::{Path, PathBuf};

use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] tofrecon::Error),

    /// Invalid configuration; `location` names the file and, when known, line or field.
    #[error("configuration error in {location}: {message}")]
    Config { location: String, message: String },

    /// A file exists but does not hold what it claims to.
    #[error("malformed file {source_name}: {message}")]
    Format { source_name: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn config(location: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config {
            location: location.into(),
            message: message.into(),
        }
    }

    pub fn format(source_name: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Format {
            source_name: source_name.into(),
            message: message.into(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use tofrecon::Error as E;
        match self {
            CliError::Config { .. } => EXIT_CONFIG,
            CliError::Format { .. } | CliError::Io { .. } => EXIT_IO,
            CliError::Core(e) if e.is_numerical() => EXIT_NUMERICAL,
            CliError::Core(E::Io { .. } | E::Json(_) | E::Format { .. }) => EXIT_IO,
            CliError::Core(_) => EXIT_CONFIG,
        }
    }
}
