use std::path::Path;

use serde::Serialize;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {message}")]
    Config { path: String, message: String },

    #[error("{path}: {message}")]
    Io { path: String, message: String },

    #[error("missing artifact {path}")]
    MissingArtifact { path: String },

    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: convbeam::Error,
    },
}

impl CliError {
    pub fn config(path: impl AsRef<Path>, message: impl Into<String>) -> Self {
        CliError::Config {
            path: path.as_ref().display().to_string(),
            message: message.into(),
        }
    }

    pub fn io(path: impl AsRef<Path>, err: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            message: err.to_string(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config { .. } => "config",
            CliError::Io { .. } => "io",
            CliError::MissingArtifact { .. } => "missing-artifact",
            CliError::Core { .. } => "pipeline",
        }
    }

    /// The one-line JSON record printed on failure.
    pub fn record(&self) -> ErrorRecord {
        let path = match self {
            CliError::Config { path, .. }
            | CliError::Io { path, .. }
            | CliError::MissingArtifact { path } => Some(path.clone()),
            CliError::Core { .. } => None,
        };
        ErrorRecord {
            error: self.kind(),
            message: self.to_string(),
            path,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ErrorRecord {
    pub error: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

pub trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T>;
}

impl<T> Context<T> for convbeam::Result<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| CliError::Core {
            context: what(),
            source,
        })
    }
}
