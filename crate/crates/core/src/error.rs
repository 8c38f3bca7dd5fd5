use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch for {field}: expected {expected}, found {found}")]
    DimensionMismatch {
        field: String,
        expected: usize,
        found: usize,
    },

    #[error("shape mismatch in {context}: {detail}")]
    ShapeMismatch { context: String, detail: String },

    #[error("depth map has no valid pixels; cannot initialize an empty cloud")]
    EmptyCloud,

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("degenerate rotation for gaussian {index}: quaternion norm {norm}")]
    DegenerateRotation { index: usize, norm: f64 },

    #[error("training diverged at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },

    #[error("unknown prompt {prompt:?}; nearest lexicon keys: {suggestions:?}")]
    UnknownPrompt { prompt: String, suggestions: Vec<String> },

    #[error("lexicon is missing canonical phrase {0:?}")]
    MissingCanonical(String),

    #[error("bad magic in {0}")]
    BadMagic(PathBuf),

    #[error("unsupported container version {version} in {path}")]
    UnsupportedVersion { path: PathBuf, version: u16 },

    #[error("unknown dtype code {code} in {path}")]
    UnknownDType { path: PathBuf, code: u8 },

    #[error("truncated container {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("payload length mismatch in {path}: dims imply {expected} bytes, found {found}")]
    PayloadLength {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("crc mismatch in {path}: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { path: PathBuf, stored: u32, computed: u32 },

    #[error("checkpoint field {field}: {detail}")]
    Checkpoint { field: String, detail: String },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed document {path}: {detail}")]
    Parse { path: PathBuf, detail: String },

    #[error("image error: {0}")]
    Image(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
