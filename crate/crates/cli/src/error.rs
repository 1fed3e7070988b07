use thiserror::Error;

/// Process exit statuses. The numeric values are a stable contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    /// A property, verification or ablation member failed.
    Failure = 1,
    /// Bad flags, unreadable or invalid config, refused output directory.
    Usage = 2,
    /// Training aborted on a non-finite value.
    Numeric = 3,
}

impl ExitStatus {
    pub fn code(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Error)]
#[error("{message}")]
pub struct CliError {
    pub status: ExitStatus,
    pub message: String,
}

impl CliError {
    pub fn failure(message: impl Into<String>) -> Self {
        Self {
            status: ExitStatus::Failure,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            status: ExitStatus::Usage,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self {
            status: ExitStatus::Numeric,
            message: message.into(),
        }
    }
}

impl From<pppc_core::Error> for CliError {
    fn from(e: pppc_core::Error) -> Self {
        use pppc_core::Error as E;
        let status = match e {
            E::Config(_) | E::Checkpoint(_) => ExitStatus::Usage,
            E::Numeric(_) => ExitStatus::Numeric,
            E::Contract(_) | E::Io(_) => ExitStatus::Failure,
        };
        Self {
            status,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::failure(format!("i/o error: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::failure(format!("json error: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;
