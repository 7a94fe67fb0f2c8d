use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch on {axis}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        axis: String,
        expected: String,
        got: String,
    },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("unsupported architecture `{name}`; supported: {supported}")]
    UnsupportedArch { name: String, supported: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("dataset error at byte offset {offset}: {msg}")]
    Data { offset: u64, msg: String },

    #[error("checkpoint has bad magic bytes")]
    BadMagic,

    #[error("checkpoint checksum mismatch (stored {stored:#018x}, computed {computed:#018x})")]
    Checksum { stored: u64, computed: u64 },

    #[error("checkpoint is truncated or malformed: {0}")]
    Malformed(String),

    #[error("parameter `{name}`: {msg}")]
    ParamMismatch { name: String, msg: String },

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("layer `{layer}` is not streamable: {reason}")]
    NotStreamable { layer: String, reason: String },

    #[error("stream error: {0}")]
    Stream(String),

    #[error("phase {phase} failed: {source}")]
    Phase {
        phase: u8,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(
        op: &'static str,
        axis: impl Into<String>,
        expected: impl ToString,
        got: impl ToString,
    ) -> Self {
        Error::Shape {
            op,
            axis: axis.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
