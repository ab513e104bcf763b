use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("empty network")]
    EmptyNetwork,

    #[error("layer {layer}: {message}")]
    Layer { layer: usize, message: String },

    #[error("invalid config field `{field}`: {message}")]
    Config { field: &'static str, message: String },

    #[error("value {value} out of range [0, {max}]")]
    OutOfRange { value: i64, max: i64 },

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("segment required: activations exceed bank capacity by {shortfall} bytes")]
    SegmentRequired { shortfall: u64 },

    #[error("unknown bank id {0}")]
    UnknownBank(usize),

    #[error("replication replica count must be at least 1")]
    ZeroReplication,

    #[error("{0}")]
    Schedule(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn layer(layer: usize, message: impl Into<String>) -> Self {
        Error::Layer {
            layer,
            message: message.into(),
        }
    }

    pub(crate) fn config(field: &'static str, message: impl Into<String>) -> Self {
        Error::Config {
            field,
            message: message.into(),
        }
    }
}
