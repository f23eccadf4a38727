use std::path::PathBuf;

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Unified error type for extraction, fitting, and pipeline failures.
///
/// Every variant maps to one of three process exit codes so the CLI can
/// distinguish bad inputs (2) from numerical breakdowns (3) and missing
/// pipeline artifacts (4).
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or out-of-domain input: unparseable SVG or CSV, negative
    /// quantities, inconsistent axis anchors, bad configuration values.
    #[error("invalid input: {0}")]
    BadInput(String),

    /// I/O failure while reading or writing a concrete path.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A numerical procedure failed: no optimizer start converged, a
    /// covariance matrix was singular, too many bootstrap resamples were
    /// excluded, and so on.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A pipeline step needed an artifact that a previous step should have
    /// produced, but the file is absent.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    /// A pipeline step failed; wraps the underlying error with the step name
    /// so `pipeline` failures identify where they happened.
    #[error("step '{step}' failed: {source}")]
    Step {
        step: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Process exit code for the CLI: 2 bad input, 3 numerical failure,
    /// 4 missing artifact.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::BadInput(_) | Error::Io { .. } => 2,
            Error::Numerical(_) => 3,
            Error::MissingArtifact(_) => 4,
            Error::Step { source, .. } => source.exit_code(),
        }
    }

    /// Attach a path to a raw I/O error.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wrap an error with the pipeline step it occurred in.
    pub fn in_step(self, step: impl Into<String>) -> Self {
        Error::Step {
            step: step.into(),
            source: Box::new(self),
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::BadInput(format!("csv: {e}"))
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::BadInput(format!("json: {e}"))
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::BadInput(format!("toml: {e}"))
    }
}
