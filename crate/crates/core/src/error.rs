use thiserror::Error;

/// Workspace-wide error type. Variants are kept distinct where callers are
/// expected to tell failure classes apart (e.g. a zero-norm contract breach
/// is not a shape mismatch, a corrupt archive manifest is not a version
/// mismatch).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    /// Byte-level parse failure (PGM and friends). `offset` is the byte at
    /// which parsing gave up.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("archive version mismatch: {0}")]
    ArchiveVersion(String),

    #[error("archive manifest corrupt: {0}")]
    ArchiveManifest(String),

    #[error("archive payload offsets inconsistent: {0}")]
    ArchiveOffsets(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
