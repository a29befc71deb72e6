use std::fmt::Display;
use std::process::ExitCode;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    /// Bad or missing inputs.
    #[error("{0}")]
    Validation(String),
    /// Failure while computing or writing outputs.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Validation(_) => 2,
            Self::Runtime(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Usage(_) => "usage",
            Self::Validation(_) => "validation",
            Self::Runtime(_) => "runtime",
        }
    }

    pub fn report(&self) -> ExitCode {
        let doc = serde_json::json!({ "error": self.kind(), "code": self.code(), "message": self.to_string() });
        eprintln!("{doc}");
        ExitCode::from(self.code())
    }
}

/// Tags a foreign error with the exit class it belongs to.
pub trait Classify<T> {
    fn invalid(self, what: impl Display) -> Result<T, CliError>;
    fn runtime(self, what: impl Display) -> Result<T, CliError>;
}

impl<T, E: Display> Classify<T> for Result<T, E> {
    fn invalid(self, what: impl Display) -> Result<T, CliError> {
        self.map_err(|e| CliError::Validation(format!("{what}: {e}")))
    }

    fn runtime(self, what: impl Display) -> Result<T, CliError> {
        self.map_err(|e| CliError::Runtime(format!("{what}: {e}")))
    }
}
