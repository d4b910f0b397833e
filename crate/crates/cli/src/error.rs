use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Config,
    Numeric,
    Io,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Numeric => 3,
            ErrorKind::Io => 4,
        }
    }
}

/// Failure of one CLI run, reported on stderr as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, thiserror::Error)]
#[error("{module}::{operation}: {}", .messages.join("; "))]
pub struct CliError {
    pub kind: ErrorKind,
    pub module: &'static str,
    pub operation: &'static str,
    pub messages: Vec<String>,
}

impl CliError {
    pub fn new(kind: ErrorKind, module: &'static str, operation: &'static str, messages: Vec<String>) -> Self {
        Self {
            kind,
            module,
            operation,
            messages,
        }
    }

    pub fn config(operation: &'static str, messages: Vec<String>) -> Self {
        Self::new(ErrorKind::Config, "cli", operation, messages)
    }

    pub fn numeric(module: &'static str, operation: &'static str, e: impl std::fmt::Display) -> Self {
        Self::new(ErrorKind::Numeric, module, operation, vec![e.to_string()])
    }

    pub fn io(operation: &'static str, path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        Self::new(ErrorKind::Io, "cli", operation, vec![format!("{}: {e}", path.display())])
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Report<'a> {
            error: &'a CliError,
            exit_code: i32,
        }
        serde_json::to_string(&Report {
            error: self,
            exit_code: self.exit_code(),
        })
        .expect("error report serializes")
    }
}
