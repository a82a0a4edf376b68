use std::fmt;

/// Failure reported as a single `error kind=... exit=...` line.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn user(kind: &'static str, message: impl Into<String>) -> Self {
        Self { kind, code: 2, message: message.into() }
    }

    pub fn internal(kind: &'static str, message: impl Into<String>) -> Self {
        Self { kind, code: 1, message: message.into() }
    }

    /// Machine-parsable, one line, no embedded newlines.
    pub fn line(&self) -> String {
        let msg = self.message.replace(['\n', '\r'], " ");
        format!("error kind={} exit={}: {}", self.kind, self.code, msg)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.line())
    }
}

impl From<metaover::Error> for CliError {
    fn from(e: metaover::Error) -> Self {
        if e.is_user_error() {
            Self::user("config", e.to_string())
        } else {
            Self::internal("numeric", e.to_string())
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
