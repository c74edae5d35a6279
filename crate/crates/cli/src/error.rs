use std::path::PathBuf;

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing input {path}: {hint}")]
    MissingInput { path: PathBuf, hint: String },
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("{0}")]
    Internal(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit status. Each failure class has its own code so scripts
    /// can tell a bad config from a missing artifact.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Internal(_) => 1,
            Error::Usage(_) => 2,
            Error::Config(_) => 3,
            Error::MissingInput { .. } => 4,
            Error::CheckpointMismatch(_) => 5,
            Error::InvalidData(_) => 6,
            Error::Training(_) => 7,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Internal(_) => "internal",
            Error::Usage(_) => "usage",
            Error::Config(_) => "config",
            Error::MissingInput { .. } => "missing_input",
            Error::CheckpointMismatch(_) => "checkpoint_mismatch",
            Error::InvalidData(_) => "invalid_data",
            Error::Training(_) => "training",
        }
    }

    /// The single JSON line printed to stderr on failure.
    pub fn json_line(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            error: &'a str,
            code: i32,
            message: String,
        }
        serde_json::to_string(&Line { error: self.kind(), code: self.exit_code(), message: self.to_string() })
            .expect("plain struct serialises")
    }

    pub fn missing(path: impl Into<PathBuf>, hint: impl Into<String>) -> Self {
        Error::MissingInput { path: path.into(), hint: hint.into() }
    }
}

impl From<volrep_core::Error> for Error {
    fn from(e: volrep_core::Error) -> Self {
        use volrep_core::Error as E;
        match e {
            E::Config(m) => Error::Config(m),
            E::Io { ref source, ref path } if source.kind() == std::io::ErrorKind::NotFound => {
                Error::missing(path.clone(), "file not found")
            }
            E::InvalidInput(_) | E::Format { .. } | E::Undefined(_) | E::Json(_) => Error::InvalidData(e.to_string()),
            E::Io { .. } => Error::Internal(e.to_string()),
        }
    }
}

impl From<volrep_nn::Error> for Error {
    fn from(e: volrep_nn::Error) -> Self {
        use volrep_nn::Error as E;
        match e {
            E::Core(c) => c.into(),
            E::Config(m) => Error::Config(m),
            E::InvalidInput(m) => Error::InvalidData(m),
            E::CheckpointMismatch(m) => Error::CheckpointMismatch(m),
            E::Training { step, reason, snapshot } => {
                Error::Training(format!("step {step}: {reason}; recent history {snapshot}"))
            }
            E::Io { ref source, ref path } if source.kind() == std::io::ErrorKind::NotFound => {
                Error::missing(path.clone(), "file not found")
            }
            E::Io { .. } => Error::Internal(e.to_string()),
            E::Json(j) => Error::InvalidData(j.to_string()),
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::InvalidData(e.to_string())
    }
}
