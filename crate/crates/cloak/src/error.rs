//! Error type shared across the library.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid budget schedule: {0}")]
    InvalidSchedule(String),

    #[error("set index {index} out of range 1..={max}")]
    SetIndexOutOfRange { index: usize, max: usize },

    #[error("address {addr} out of range (capacity {capacity})")]
    AddressOutOfRange { addr: u64, capacity: u64 },

    #[error("duplicate address {0} in batch")]
    DuplicateAddress(u64),

    #[error("block width mismatch: expected {expected} bytes, got {got}")]
    WidthMismatch { expected: usize, got: usize },

    #[error("ciphertext authentication failed")]
    AuthFailure,

    #[error("fit underdetermined: {0}")]
    FitUnderdetermined(String),

    #[error("trace parse error at line {line}: {msg}")]
    TraceParse { line: u64, msg: String },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("malformed history: {0}")]
    History(String),

    #[error("audit precondition: {0}")]
    Audit(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}
