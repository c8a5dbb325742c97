use std::path::PathBuf;

use thiserror::Error;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    SceneFile {
        path: PathBuf,
        #[source]
        source: SceneFileError,
    },
    #[error("{path}: {message}")]
    Artifact { path: PathBuf, message: String },
    #[error("numerical failure: {0}")]
    Numeric(String),
}

impl LabError {
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) => 3,
            LabError::Io { .. } | LabError::SceneFile { .. } | LabError::Artifact { .. } => 4,
            LabError::Numeric(_) => 5,
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        LabError::Io { context: context.into(), source }
    }

    pub fn artifact(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        LabError::Artifact { path: path.into(), message: message.into() }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SceneFileError {
    #[error("unsupported scene file version {found} (this build reads version {supported})")]
    Version { found: u64, supported: u64 },
    #[error("file is truncated")]
    Truncated,
    #[error("checksum mismatch: stored {stored}, computed {computed}")]
    Checksum { stored: String, computed: String },
    #[error("malformed scene file: {0}")]
    Malformed(String),
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;

impl From<nextpoint_core::train::TrainError> for LabError {
    fn from(e: nextpoint_core::train::TrainError) -> Self {
        use nextpoint_core::train::TrainError as T;
        match e {
            T::InvalidConfig(m) => LabError::Config(m.to_string()),
            other => LabError::Numeric(other.to_string()),
        }
    }
}

impl From<nextpoint_core::policy::PolicyError> for LabError {
    fn from(e: nextpoint_core::policy::PolicyError) -> Self {
        use nextpoint_core::policy::PolicyError as P;
        match e {
            P::InvalidConfig(m) => LabError::Config(m.to_string()),
            other => LabError::Numeric(other.to_string()),
        }
    }
}
