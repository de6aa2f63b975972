use snapdoa_core::Error as CoreError;

/// Failures surfaced by the command line, each with a distinct exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data/model mismatch: {0}")]
    Mismatch(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Core(CoreError),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    /// 0 success, 1 other, 2 config, 3 data/model mismatch, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Mismatch(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Core(e) => match e {
                CoreError::Domain(_) | CoreError::UnsupportedGeometry(_) => 2,
                CoreError::Mismatch(_) => 3,
                CoreError::Numerical(_) => 4,
                _ => 1,
            },
            CliError::Other(_) => 1,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}
