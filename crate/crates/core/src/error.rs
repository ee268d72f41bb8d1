use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid architecture: {0}")]
    Arch(String),

    #[error("layer {0} has no parameters")]
    NotParametric(usize),

    #[error("curvature memory guard exceeded: {needed} floats required, limit {limit}")]
    MemoryGuard { needed: u64, limit: u64 },

    #[error("oracle size guard exceeded: {params} parameters, limit {limit}")]
    OracleGuard { params: usize, limit: usize },

    #[error("singular Hessian entry at parameter {0}")]
    Singular(usize),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad IDX magic {0:#010x}")]
    BadMagic(u32),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint has no precision vector; a posterior is required")]
    MissingPrecision,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
