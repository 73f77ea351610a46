use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("degenerate clustering: cluster {cluster} received no samples")]
    DegenerateClustering { cluster: usize },
    #[error("empty class directory: {0}")]
    EmptyClass(String),
    #[error("singular covariance; increase shrinkage (lambda={lambda})")]
    SingularCovariance { lambda: f64 },
    #[error("insufficient data: need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("unknown album token")]
    UnknownToken,
    #[error("album is empty")]
    EmptyAlbum,
    #[error("album has not been grouped yet")]
    NotGrouped,
    #[error("payload too large: {got} bytes exceeds limit {limit}")]
    PayloadTooLarge { got: usize, limit: usize },
    #[error("service error {code}: {message}")]
    Service { code: u16, message: String },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("config error in field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image decode error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(name: &str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.to_string(),
            reason: reason.into(),
        }
    }

    pub fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            got: got.into(),
        }
    }
}
