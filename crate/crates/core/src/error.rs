use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error at node `{node}`: {message}")]
    Shape { node: String, message: String },

    #[error("invalid model structure: {0}")]
    Structure(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("degenerate gamma in `{layer}` (|gamma| <= {floor:e}) at channels {channels:?}")]
    DegenerateGamma {
        layer: String,
        floor: f32,
        channels: Vec<usize>,
    },

    #[error("zero-norm filters in `{layer}` at indices {filters:?}")]
    DegenerateFilter { layer: String, filters: Vec<usize> },

    #[error("cannot decorate in {mode} mode, ineligible layers: {layers:?}")]
    Ineligible { mode: String, layers: Vec<String> },

    #[error("mask for group {group} keeps {kept} channels, below the floor of {floor}")]
    FloorViolation { group: String, kept: usize, floor: usize },

    #[error("invalid prune mask: {0}")]
    Mask(String),

    #[error("model too large for brute-force evaluation: {channels} gated channels (limit {limit})")]
    TooLarge { channels: usize, limit: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(node: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Shape {
            node: node.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures while reading a checkpoint file. Each variant is a distinct error code.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint format `{found}` (expected `{expected}`)")]
    Version { found: String, expected: String },

    #[error("truncated blob: header declares {expected} bytes, found {found}")]
    TruncatedBlob { expected: usize, found: usize },

    #[error("manifest does not match blob: {0}")]
    Manifest(String),

    #[error("malformed header: {0}")]
    Header(String),
}

impl CheckpointError {
    pub fn code(&self) -> &'static str {
        match self {
            CheckpointError::Version { .. } => "E_VERSION",
            CheckpointError::TruncatedBlob { .. } => "E_TRUNCATED",
            CheckpointError::Manifest(_) => "E_MANIFEST",
            CheckpointError::Header(_) => "E_HEADER",
        }
    }
}
