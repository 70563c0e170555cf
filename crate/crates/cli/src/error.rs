use std::path::PathBuf;

use priorprobe_core::backend::BackendError;
use priorprobe_core::engine::{EngineError, SweepFailure};
use priorprobe_core::llm::LlmError;
use thiserror::Error;

/// Failure category, mapped to the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Network,
    Parse,
    Io,
    Other,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Other => 1,
            ErrorKind::Config => 2,
            ErrorKind::Network => 3,
            ErrorKind::Parse => 4,
            ErrorKind::Io => 5,
        }
    }
}

#[derive(Debug, Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Config, message)
    }

    pub fn other(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Other, message)
    }

    pub fn io(path: &std::path::Path, err: impl std::fmt::Display) -> Self {
        Self::new(ErrorKind::Io, format!("{}: {err}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}

pub fn llm_kind(err: &LlmError) -> ErrorKind {
    match err {
        LlmError::MissingApiKey { .. } | LlmError::InvalidConfig { .. } => ErrorKind::Config,
        LlmError::Http { .. } | LlmError::Rejected(_) => ErrorKind::Network,
        LlmError::Parse { .. } => ErrorKind::Parse,
        LlmError::CacheMiss { .. } | LlmError::Cache { .. } => ErrorKind::Io,
    }
}

impl From<LlmError> for CliError {
    fn from(err: LlmError) -> Self {
        Self::new(llm_kind(&err), err.to_string())
    }
}

impl From<SweepFailure> for CliError {
    fn from(err: SweepFailure) -> Self {
        let kind = match &err.first.source {
            EngineError::Backend(BackendError::Remote(e)) => llm_kind(e),
            EngineError::InvalidRun(_) => ErrorKind::Config,
            _ => ErrorKind::Other,
        };
        Self::new(kind, err.to_string())
    }
}

/// Error while reading a file the command needs.
pub fn read_error(path: &std::path::Path, err: std::io::Error) -> CliError {
    CliError::io(&PathBuf::from(path), err)
}
