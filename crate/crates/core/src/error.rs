use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error("captioning aborted: {failed} of {total} requests failed")]
    TooManyFailures { failed: usize, total: usize },
    #[error("client error: {0}")]
    Client(String),
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Nn(#[from] authguard_nn::NnError),
}

pub type Result<T> = std::result::Result<T, Error>;
