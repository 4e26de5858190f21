use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at {location}: expected {expected:?}, got {actual:?}")]
    Shape {
        location: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward called before forward")]
    BackwardBeforeForward,

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("label code {code} out of range for {classes} classes")]
    LabelOutOfRange { code: u8, classes: usize },

    #[error("slice {0} has no mask")]
    MissingMask(usize),

    #[error("undefined distance: {0}")]
    UndefinedDistance(&'static str),

    #[error("no ROI: no heart detected in any slice of the search range")]
    NoRoi,

    #[error("infeasible phantom geometry: {0}")]
    InfeasibleGeometry(String),

    #[error("unknown network kind `{0}`")]
    UnknownKind(String),

    #[error("missing slice file for index {index} in {dir}")]
    MissingSlice { dir: PathBuf, index: usize },

    #[error("size mismatch in {path}: expected {expected} bytes, found {actual}")]
    FileSize {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("checkpoint blob for parameter `{name}` is truncated: expected {expected} values, found {actual}")]
    TruncatedBlob {
        name: String,
        expected: usize,
        actual: usize,
    },

    #[error("checkpoint is missing a blob for parameter `{0}`")]
    MissingBlob(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable code used by the command-line front end.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "E_SHAPE",
            Error::InvalidArgument(_) => "E_ARG",
            Error::BackwardBeforeForward => "E_STATE",
            Error::NonFiniteGradient(_) | Error::NonFiniteLoss { .. } => "E_NUMERIC",
            Error::LabelOutOfRange { .. } => "E_LABEL",
            Error::MissingMask(_) => "E_MASK",
            Error::UndefinedDistance(_) => "E_UNDEFINED",
            Error::NoRoi => "E_NO_ROI",
            Error::InfeasibleGeometry(_) => "E_GEOMETRY",
            Error::UnknownKind(_) => "E_KIND",
            Error::MissingSlice { .. } => "E_MISSING_SLICE",
            Error::FileSize { .. } => "E_SIZE",
            Error::TruncatedBlob { .. } | Error::MissingBlob(_) => "E_BLOB",
            Error::Version { .. } => "E_VERSION",
            Error::Format { .. } => "E_FORMAT",
            Error::Io { .. } => "E_IO",
        }
    }
}
