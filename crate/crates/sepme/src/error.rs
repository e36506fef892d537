use std::path::Path;

use sepme_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 0 success, 2 config error, 3 numerical failure, 4 I/O error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                CoreError::InvalidArgument(_) | CoreError::UnknownConcept(_) | CoreError::DuplicateConcept(_) => 2,
                _ => 3,
            },
            CliError::Io { .. } | CliError::Format(_) => 4,
        }
    }

    /// Extra guidance printed under the error message.
    pub fn hint(&self) -> Option<&'static str> {
        match self {
            CliError::Core(CoreError::NullSpaceEmpty { .. }) => Some(
                "the known concepts span every token direction; raise model.d_in, lower model.tokens or erase fewer concepts",
            ),
            CliError::Core(CoreError::NonFinite(_)) => Some("lower erase.lr or erase.beta"),
            _ => None,
        }
    }
}
