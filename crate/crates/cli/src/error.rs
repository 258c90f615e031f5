use std::path::PathBuf;

use serde_json::json;
use tempoflow_core::Error;

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    /// An artifact with the same config digest already exists.
    Rerun { record: PathBuf, digest: String },
    Usage(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Rerun { record, digest } => write!(
                f,
                "{} already records config digest {digest}; pass --force to overwrite",
                record.display()
            ),
            CliError::Usage(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => match e {
                Error::Shape { .. } => "shape_mismatch",
                Error::InvalidArgument(_) => "invalid_argument",
                Error::NonFinite(_) => "non_finite",
                Error::Solver { .. } => "solver_failure",
                Error::UndefinedMetric(_) => "undefined_metric",
                Error::Format { .. } => "bad_format",
                Error::MissingPrerequisite(_) => "missing_prerequisite",
                Error::Io { .. } => "io",
                Error::Json(_) => "json",
                Error::Wav(_) => "wav",
            },
            CliError::Rerun { .. } => "rerun_refused",
            CliError::Usage(_) => "usage",
        }
    }

    /// Machine-readable form written to stderr.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = json!({ "error": self.kind(), "message": self.to_string() });
        match self {
            CliError::Core(Error::Solver { steps, t, .. }) => {
                v["steps"] = json!(steps);
                v["t"] = json!(t);
            }
            CliError::Rerun { record, digest } => {
                v["record"] = json!(record);
                v["config_digest"] = json!(digest);
            }
            _ => {}
        }
        v
    }
}
