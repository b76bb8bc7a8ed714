use std::fmt;
use std::path::Path;

use calibra::aid::AidError;
use calibra::curation::CurationError;
use calibra::ensemble::EnsembleError;
use calibra::metrics::MetricsError;
use calibra::record::RecordError;
use calibra::temperature::{FitEvalError, TemperatureError};
use calibra::{BackendError, MergeError};
use serde_json::{json, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Input,
    Backend,
    Invariant,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Usage | Kind::Input => 2,
            Kind::Backend => 3,
            Kind::Invariant => 4,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Kind::Usage => "usage",
            Kind::Input => "input",
            Kind::Backend => "backend",
            Kind::Invariant => "invariant",
        }
    }
}

/// A failure that ends the process: printed to stderr as one JSON object.
#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
    pub details: Value,
}

impl CliError {
    pub fn new(kind: Kind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
            details: Value::Null,
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(Kind::Usage, message)
    }

    pub fn input(message: impl Into<String>) -> Self {
        Self::new(Kind::Input, message)
    }

    pub fn invariant(message: impl Into<String>) -> Self {
        Self::new(Kind::Invariant, message)
    }

    pub fn with(mut self, details: Value) -> Self {
        self.details = details;
        self
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::input(format!("i/o error on {}: {e}", path.display()))
            .with(json!({ "path": path.display().to_string() }))
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }

    pub fn to_json(&self) -> Value {
        let mut v = json!({
            "error": self.kind.as_str(),
            "message": self.message,
            "exit_code": self.exit_code(),
        });
        if !self.details.is_null() {
            v["details"] = self.details.clone();
        }
        v
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<RecordError> for CliError {
    fn from(e: RecordError) -> Self {
        let details = match &e {
            RecordError::Parse {
                line, byte_offset, ..
            } => json!({ "line": line, "byte_offset": byte_offset }),
            RecordError::InvariantViolation { index, .. } => json!({ "index": index }),
            _ => Value::Null,
        };
        CliError::input(e.to_string()).with(details)
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        let kind = match e {
            BackendError::MissingApiKey(_) | BackendError::InvalidConfig(_) => Kind::Usage,
            _ => Kind::Backend,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<CurationError> for CliError {
    fn from(e: CurationError) -> Self {
        match e {
            CurationError::Backend {
                problem_id,
                sample_index,
                source,
                partial,
            } => {
                if matches!(source, BackendError::MissingApiKey(_) | BackendError::InvalidConfig(_)) {
                    return source.into();
                }
                let msg = format!("backend failed on problem {problem_id:?} sample {sample_index}: {source}");
                CliError::new(Kind::Backend, msg).with(json!({
                    "problem_id": problem_id,
                    "sample_index": sample_index,
                    "completed_records": partial.len(),
                    "resumable": true,
                }))
            }
            CurationError::BadLogprobs { .. } => CliError::new(Kind::Backend, e.to_string()),
            CurationError::Record(r) => r.into(),
            other => CliError::input(other.to_string()),
        }
    }
}

impl From<MergeError> for CliError {
    fn from(e: MergeError) -> Self {
        let details = match &e {
            MergeError::Malformed { offset, .. } => json!({ "offset": offset }),
            _ => Value::Null,
        };
        CliError::input(e.to_string()).with(details)
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::input(e.to_string())
    }
}

impl From<TemperatureError> for CliError {
    fn from(e: TemperatureError) -> Self {
        CliError::input(e.to_string())
    }
}

impl From<FitEvalError> for CliError {
    fn from(e: FitEvalError) -> Self {
        match e {
            FitEvalError::Temperature(t) => t.into(),
            FitEvalError::Metrics(m) => m.into(),
        }
    }
}

impl From<EnsembleError> for CliError {
    fn from(e: EnsembleError) -> Self {
        CliError::input(e.to_string())
    }
}

impl From<AidError> for CliError {
    fn from(e: AidError) -> Self {
        match e {
            AidError::InvalidConfig(_) => CliError::usage(e.to_string()),
            other => CliError::invariant(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
