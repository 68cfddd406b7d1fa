use std::fmt;
use std::path::Path;

use serde_json::json;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Backend,
    Data,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 2,
            ErrorKind::Backend => 3,
            ErrorKind::Data => 4,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Usage => "usage",
            ErrorKind::Backend => "backend",
            ErrorKind::Data => "data",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn usage(m: impl fmt::Display) -> Self {
        Self {
            kind: ErrorKind::Usage,
            message: m.to_string(),
        }
    }

    pub fn backend(m: impl fmt::Display) -> Self {
        Self {
            kind: ErrorKind::Backend,
            message: m.to_string(),
        }
    }

    pub fn data(m: impl fmt::Display) -> Self {
        Self {
            kind: ErrorKind::Data,
            message: m.to_string(),
        }
    }

    pub fn io(path: &Path, e: impl fmt::Display) -> Self {
        Self::data(format!("{}: {e}", path.display()))
    }

    pub fn to_json(&self) -> String {
        json!({"error": {"kind": self.kind.as_str(), "message": self.message}}).to_string()
    }
}

impl From<crop_core::pipeline::PipelineError> for CliError {
    fn from(e: crop_core::pipeline::PipelineError) -> Self {
        use crop_core::pipeline::PipelineErrorKind;
        match e.kind {
            PipelineErrorKind::Backend(_) => Self::backend(&e),
            _ => Self::data(&e),
        }
    }
}

impl From<crop_core::dataset::DatasetError> for CliError {
    fn from(e: crop_core::dataset::DatasetError) -> Self {
        Self::data(e)
    }
}

impl From<crop_core::eval::EvalError> for CliError {
    fn from(e: crop_core::eval::EvalError) -> Self {
        Self::data(e)
    }
}

impl From<crop_core::objectives::ObjectiveError> for CliError {
    fn from(e: crop_core::objectives::ObjectiveError) -> Self {
        Self::data(e)
    }
}

impl From<crop_core::composition::CompositionError> for CliError {
    fn from(e: crop_core::composition::CompositionError) -> Self {
        Self::data(e)
    }
}

impl From<crop_core::OverlayError> for CliError {
    fn from(e: crop_core::OverlayError) -> Self {
        Self::data(e)
    }
}

impl From<crop_study::StudyError> for CliError {
    fn from(e: crop_study::StudyError) -> Self {
        Self::data(e)
    }
}

impl From<crop_core::pipeline::BackendError> for CliError {
    fn from(e: crop_core::pipeline::BackendError) -> Self {
        Self::backend(e)
    }
}
