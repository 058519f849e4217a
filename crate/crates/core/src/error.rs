use std::path::PathBuf;

/// Errors produced by the descriptor pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic bytes {found:?}, expected \"VITD\"")]
    BadMagic { found: Vec<u8> },

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated container: needed {needed} bytes, found {available}")]
    Truncated { needed: usize, available: usize },

    #[error("shape mismatch: expected {expected} payload bytes, found {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("invalid header: {0}")]
    InvalidHeader(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("dimension mismatch: expected {expected}, found {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("zero-norm vector at index {0}")]
    ZeroNorm(usize),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("image error: {0}")]
    Image(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
