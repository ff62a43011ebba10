use std::fmt;

/// Command failure with its process exit code: 1 for runtime or numeric
/// failures, 2 for usage and configuration errors.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(msg: impl fmt::Display) -> Self {
        Self {
            code: 2,
            message: msg.to_string(),
        }
    }

    pub fn runtime(msg: impl fmt::Display) -> Self {
        Self {
            code: 1,
            message: msg.to_string(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<nclip::Error> for CliError {
    fn from(e: nclip::Error) -> Self {
        match e {
            nclip::Error::Config(_) | nclip::Error::Parameter(_) => CliError::usage(e),
            _ => CliError::runtime(e),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::runtime(e)
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::runtime(e)
    }
}
