//! Error types shared across the crate.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Tensor operation received incompatible shapes.
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// An index or length was out of bounds for the tensor it addresses.
    Bounds {
        op: &'static str,
        index: usize,
        limit: usize,
    },
    /// Invalid configuration value.
    Config(String),
    /// Malformed input data. Carries the 1-based line number when known.
    Data {
        line: Option<usize>,
        message: String,
    },
    /// Checkpoint format version is not supported by this build.
    CheckpointVersion { found: u32, supported: u32 },
    /// Checkpoint manifest disagrees with its payload.
    CheckpointPayload(String),
    /// Checkpoint was trained against a different vocabulary.
    CheckpointFingerprint { expected: String, found: String },
    /// Other checkpoint problems: bad magic, truncated file, broken header.
    CheckpointFormat(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            Error::Bounds { op, index, limit } => {
                write!(f, "{op}: index {index} out of bounds (limit {limit})")
            }
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Data { line: Some(n), message } => write!(f, "data error at line {n}: {message}"),
            Error::Data { line: None, message } => write!(f, "data error: {message}"),
            Error::CheckpointVersion { found, supported } => write!(
                f,
                "checkpoint version {found} is newer than supported version {supported}"
            ),
            Error::CheckpointPayload(msg) => {
                write!(f, "checkpoint manifest/payload inconsistency: {msg}")
            }
            Error::CheckpointFingerprint { expected, found } => write!(
                f,
                "vocabulary fingerprint mismatch: checkpoint has {expected}, got {found}"
            ),
            Error::CheckpointFormat(msg) => write!(f, "checkpoint format error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl Error {
    pub fn data(message: impl Into<String>) -> Self {
        Error::Data {
            line: None,
            message: message.into(),
        }
    }

    pub fn data_at(line: usize, message: impl Into<String>) -> Self {
        Error::Data {
            line: Some(line),
            message: message.into(),
        }
    }

    /// True for every checkpoint-related variant; the CLI maps these to a
    /// dedicated exit code.
    pub fn is_checkpoint(&self) -> bool {
        matches!(
            self,
            Error::CheckpointVersion { .. }
                | Error::CheckpointPayload(_)
                | Error::CheckpointFingerprint { .. }
                | Error::CheckpointFormat(_)
        )
    }
}
