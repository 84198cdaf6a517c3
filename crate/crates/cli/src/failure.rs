//! Failure classes and their exit codes.

use std::fmt;
use std::process::ExitCode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    /// Bad flags, unreadable or invalid scenario/capture files.
    Config,
    /// Divergence, port in use, I/O during a run.
    Runtime,
    /// The delay estimator could not produce an estimate.
    Estimator,
}

impl FailureKind {
    pub fn code(self) -> u8 {
        match self {
            FailureKind::Config => 2,
            FailureKind::Runtime => 3,
            FailureKind::Estimator => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FailureKind::Config => "config",
            FailureKind::Runtime => "runtime",
            FailureKind::Estimator => "estimator",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub kind: FailureKind,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl fmt::Display) -> Self {
        Self { kind: FailureKind::Config, message: message.to_string() }
    }

    pub fn runtime(message: impl fmt::Display) -> Self {
        Self { kind: FailureKind::Runtime, message: message.to_string() }
    }

    pub fn estimator(message: impl fmt::Display) -> Self {
        Self { kind: FailureKind::Estimator, message: message.to_string() }
    }

    /// One-line JSON for stderr.
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self.kind.as_str(), "message": self.message }).to_string()
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.kind.code())
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error: {}", self.kind.as_str(), self.message)
    }
}

impl std::error::Error for Failure {}
