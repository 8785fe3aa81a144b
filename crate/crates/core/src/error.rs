use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter error: {0}")]
    Param(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("fixed-point overflow: {0}")]
    Overflow(String),
    #[error("noise budget exhausted ({0:.1} bits left)")]
    NoiseExhausted(f64),
    #[error("ciphertext owner mismatch")]
    OwnerMismatch,
    #[error("unsupported operation: {0}")]
    Unsupported(&'static str),
    #[error("malformed data: {0}")]
    Malformed(String),
    #[error("framing error: {0}")]
    Framing(String),
    #[error("phase violation: {0}")]
    Phase(String),
    #[error("handshake aborted: {0}")]
    Handshake(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("connection lost: {0}")]
    Connection(String),
    #[error("model file: {0}")]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
