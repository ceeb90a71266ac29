use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("file not found: {}", .0.display())]
    Missing(PathBuf),

    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },

    #[error("invalid arguments: {0}")]
    Usage(String),

    #[error("{0}")]
    Invariant(String),

    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Missing(_) => 2,
            CliError::Parse { .. } | CliError::Usage(_) => 3,
            CliError::Invariant(_) => 4,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Missing(_) => "missing_file",
            CliError::Parse { .. } | CliError::Usage(_) => "parse_error",
            CliError::Invariant(_) => "invariant_violation",
            CliError::Runtime(_) => "runtime_error",
        }
    }

    /// Single-line JSON for stderr.
    pub fn to_json_line(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            error: &'a str,
            code: i32,
            message: String,
        }
        let line = Line {
            error: self.kind(),
            code: self.code(),
            message: self.to_string(),
        };
        serde_json::to_string(&line).unwrap_or_else(|_| format!("{{\"error\":\"{}\",\"code\":{}}}", self.kind(), self.code()))
    }

    /// Classifies an I/O failure on an input file.
    pub fn reading(path: &Path, e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::Missing(path.to_path_buf())
        } else {
            CliError::Runtime(format!("{}: {e}", path.display()))
        }
    }

    pub fn writing(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }
}

impl From<llatte_core::Error> for CliError {
    fn from(e: llatte_core::Error) -> Self {
        match e {
            llatte_core::Error::Io(io) => CliError::Runtime(io.to_string()),
            llatte_core::Error::Json(j) => CliError::Runtime(j.to_string()),
            other => CliError::Invariant(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
