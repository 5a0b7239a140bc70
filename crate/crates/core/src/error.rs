use std::path::PathBuf;

use thiserror::Error;

use crate::inversion::InversionResult;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png decode failed: {0}")]
    PngDecode(String),

    #[error("png encode failed: {0}")]
    PngEncode(String),

    #[error("unsupported png format: {0}")]
    UnsupportedPng(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("not enough samples: {0}")]
    InsufficientSamples(String),

    #[error("covariance product has a materially negative eigenvalue {0:e}")]
    NegativeEigenvalue(f64),

    /// The search hit a non-finite loss or gradient. The trajectory up to the
    /// failing step is preserved.
    #[error("inversion aborted at step {step}: {reason}")]
    InversionAborted {
        step: usize,
        reason: String,
        partial: Box<InversionResult>,
    },

    #[error("classifier is not trained")]
    Untrained,

    #[error("degenerate training data: {0}")]
    DegenerateData(String),

    #[error("latent file has bad magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("latent file version {0} is not supported")]
    VersionMismatch(u16),

    #[error("latent file truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("service has no enrolled identities")]
    Unenrolled,

    #[error("malformed response: {0}")]
    MalformedResponse(String),

    #[error("service error: {0}")]
    Remote(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
