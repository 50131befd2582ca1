use thiserror::Error;

use crate::config::ConfigError;

/// Failure of a subcommand, mapped onto the process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(#[from] ConfigError),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl From<mbsar::Error> for CliError {
    fn from(e: mbsar::Error) -> Self {
        use mbsar::Error as E;
        match e {
            E::Io(_) | E::Csv(_) | E::Format { .. } => CliError::Io(e.to_string()),
            E::InvalidParameter { name, .. } => CliError::Config(ConfigError {
                key: name.to_string(),
                line: None,
                message: e.to_string(),
            }),
            E::DimensionMismatch(_) => CliError::Config(ConfigError {
                key: String::new(),
                line: None,
                message: e.to_string(),
            }),
            E::CovarianceNotPositiveDefinite { .. } | E::ZeroRange { .. } => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
