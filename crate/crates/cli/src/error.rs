use std::fmt;

/// Failures sorted by exit code: usage and configuration problems exit 2,
/// failed checks and runtime errors exit 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Check(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Check(_) | CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Check(m) => write!(f, "check failed: {m}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<fbcnet::Error> for CliError {
    fn from(e: fbcnet::Error) -> Self {
        match e {
            fbcnet::Error::InvalidArgument(_) | fbcnet::Error::IndexOutOfRange { .. } => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.into())
    }
}
