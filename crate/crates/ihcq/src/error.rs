use std::io;
use std::path::{Path, PathBuf};

use ihcq_core::annotations::AnnotationError;
use ihcq_core::embed::EmbedError;
use ihcq_core::inference::InferenceError;
use ihcq_core::metrics::MetricsError;
use ihcq_core::quantify::QuantifyError;
use ihcq_core::slide::SlideError;
use ihcq_core::synth::SynthError;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}, line {line}: {message}")]
    Row {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("invalid manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("tile (gx={gx}, gy={gy}): {source}")]
    Tile {
        gx: u32,
        gy: u32,
        #[source]
        source: Box<Error>,
    },
    #[error("invalid configuration ({} problem(s))", .0.len())]
    Config(Vec<ConfigIssue>),
    #[error("{0}")]
    Usage(String),
    /// Help or version text requested on the command line; not a failure.
    #[error("{0}")]
    Help(String),
    #[error("input {path} changed since the recorded run (sha256 {expected} != {actual})")]
    DigestMismatch {
        path: String,
        expected: String,
        actual: String,
    },
    #[error(transparent)]
    Slide(#[from] SlideError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Quantify(#[from] QuantifyError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigIssue {
    pub key: String,
    pub message: String,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl AsRef<Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn format(path: impl AsRef<Path>, message: impl ToString) -> Self {
        Error::Format {
            path: path.as_ref().to_path_buf(),
            message: message.to_string(),
        }
    }

    pub fn row(path: impl AsRef<Path>, line: u64, message: impl ToString) -> Self {
        Error::Row {
            path: path.as_ref().to_path_buf(),
            line,
            message: message.to_string(),
        }
    }

    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format { .. } | Error::Row { .. } => "format",
            Error::Manifest { .. } => "manifest",
            Error::Tile { source, .. } => source.kind(),
            Error::Config(_) => "config",
            Error::Usage(_) => "usage",
            Error::Help(_) => "help",
            Error::DigestMismatch { .. } => "digest_mismatch",
            Error::Slide(_) => "slide",
            Error::Annotation(_) => "annotation",
            Error::Inference(_) => "inference",
            Error::Metrics(_) => "metrics",
            Error::Quantify(_) => "quantify",
            Error::Synth(_) => "synth",
            Error::Embed(_) => "embed",
        }
    }

    /// Structured detail for the error record, if any.
    pub fn details(&self) -> serde_json::Value {
        use serde_json::json;
        match self {
            Error::Config(issues) => json!(issues),
            Error::Row { path, line, .. } => json!({ "path": path, "line": line }),
            Error::Tile { gx, gy, .. } => json!({ "gx": gx, "gy": gy }),
            Error::Io { path, .. } | Error::Format { path, .. } | Error::Manifest { path, .. } => {
                json!({ "path": path })
            }
            Error::Inference(InferenceError::Normalization { pixel, x, y, sum }) => {
                json!({ "pixel": pixel, "x": x, "y": y, "sum": sum })
            }
            Error::Annotation(AnnotationError::OutOfBounds { index, x, y, .. }) => {
                json!({ "index": index, "x": x, "y": y })
            }
            _ => serde_json::Value::Null,
        }
    }

    /// 2 for bad invocations or configuration, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Usage(_) | Error::Config(_) => 2,
            Error::Help(_) => 0,
            _ => 1,
        }
    }

    /// `{"error": {"kind", "message", "details"}}`.
    pub fn to_record(&self) -> serde_json::Value {
        let message = match self {
            Error::Config(issues) => {
                let keys: Vec<&str> = issues.iter().map(|i| i.key.as_str()).collect();
                format!("{self}: {}", keys.join(", "))
            }
            _ => self.to_string(),
        };
        serde_json::json!({
            "error": {
                "kind": self.kind(),
                "message": message,
                "details": self.details(),
            }
        })
    }
}
