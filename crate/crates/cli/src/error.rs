//! Single-line, code-prefixed errors.

use std::fmt;

#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub detail: String,
}

impl CliError {
    pub fn new(code: &'static str, detail: impl Into<String>) -> Self {
        CliError {
            code,
            detail: detail.into(),
        }
    }

    pub fn arg(detail: impl Into<String>) -> Self {
        CliError::new("E_ARG", detail)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let detail = self.detail.split_whitespace().collect::<Vec<_>>().join(" ");
        write!(f, "{}: {}", self.code, detail)
    }
}

impl From<cardioprop_core::Error> for CliError {
    fn from(e: cardioprop_core::Error) -> Self {
        CliError::new(e.code(), e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::new("E_FORMAT", e.to_string())
    }
}
