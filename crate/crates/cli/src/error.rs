use std::fmt;

use serde_json::json;

/// Error reported by a subcommand, printed to stderr as
/// `{"error": {"kind": ..., "message": ...}}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub kind: String,
    pub message: String,
}

impl CliError {
    pub fn new(kind: &str, message: impl Into<String>) -> Self {
        CliError { kind: kind.to_string(), message: message.into() }
    }

    pub fn to_json(&self) -> String {
        json!({ "error": { "kind": self.kind, "message": self.message } }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<leakwatch_core::Error> for CliError {
    fn from(e: leakwatch_core::Error) -> Self {
        CliError::new(e.kind(), e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new("io", e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::new("json", e.to_string())
    }
}
