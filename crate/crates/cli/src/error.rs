use std::fmt;

use geolp::error::Error;
use serde::Serialize;

/// A failure mapped to a process exit code, reported as one JSON line on stderr.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_FIELD: i32 = 4;
pub const EXIT_IO: i32 = 5;

impl CliError {
    pub fn new(code: i32, kind: &'static str, message: impl Into<String>) -> Self {
        CliError { code, kind, message: message.into() }
    }

    pub fn config(message: String) -> Self {
        Self::new(EXIT_CONFIG, "config", message)
    }

    /// Any library error met while reading or validating inputs.
    pub fn config_from(e: Error) -> Self {
        match e {
            Error::GridMismatch { .. } | Error::RankMismatch { .. } => Self::from(e),
            Error::Io(m) => Self::config(m),
            other => Self::config(other.to_string()),
        }
    }

    pub fn io(context: &str, e: std::io::Error) -> Self {
        Self::new(EXIT_IO, "io", format!("{context}: {e}"))
    }

    pub fn line(&self) -> String {
        serde_json::to_string(&serde_json::json!({ "error": self.kind, "code": self.code, "message": self.message }))
            .unwrap_or_else(|_| format!("{{\"error\":\"{}\",\"code\":{}}}", self.kind, self.code))
    }
}

/// Library errors during computation: shape problems are field errors, the rest solver failures.
impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::GridMismatch { .. } | Error::RankMismatch { .. } => EXIT_FIELD,
            Error::NonPositiveDefiniteMetric { .. } | Error::DegenerateSymbol(_) | Error::Parse(_) => EXIT_CONFIG,
            Error::Io(_) => EXIT_IO,
            _ => EXIT_SOLVER,
        };
        let kind = match code {
            EXIT_FIELD => "field",
            EXIT_CONFIG => "config",
            EXIT_IO => "io",
            _ => "solver",
        };
        CliError::new(code, kind, e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.line())
    }
}
