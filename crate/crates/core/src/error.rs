//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite quantization input: {0}")]
    NonFiniteInput(f64),

    #[error("empty tensor")]
    EmptyTensor,

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unnormalized probability out of range: {0}")]
    UnnormalizedProbability(f64),

    #[error("undefined similarity: both inputs are zero")]
    UndefinedSimilarity,

    #[error("zero reference: sum of |O| is zero")]
    ZeroReference,

    #[error("bad magic: expected QATN")]
    BadMagic,

    #[error("unsupported tensor file version {0}")]
    UnsupportedVersion(u32),

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("dimension overflow in tensor file")]
    DimensionOverflow,

    #[error("truncated file")]
    TruncatedFile,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
