use std::path::PathBuf;

use thiserror::Error;

/// Exit code for bad input, flags or configuration.
pub const EXIT_VALIDATION: i32 = 2;
/// Exit code for failures while running a valid request.
pub const EXIT_RUNTIME: i32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] pdt_core::Error),

    #[error("{what}: parse error at byte {offset}: {msg}")]
    Parse {
        what: &'static str,
        offset: usize,
        msg: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Toml {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },

    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use pdt_core::Error as E;
        match self {
            CliError::Core(E::State(_) | E::Capacity { .. }) => EXIT_RUNTIME,
            CliError::Core(_) => EXIT_VALIDATION,
            CliError::Io { .. } => EXIT_RUNTIME,
            CliError::Parse { .. } | CliError::Toml { .. } | CliError::Csv { .. } | CliError::Usage(_) => {
                EXIT_VALIDATION
            }
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
