use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unknown leg {leg} on tensor of order {order}")]
    UnknownLeg { leg: usize, order: usize },

    #[error("element count mismatch: {from:?} has {from_len} elements, {to:?} needs {to_len}")]
    ElementCount {
        from: Vec<usize>,
        from_len: usize,
        to: Vec<usize>,
        to_len: usize,
    },

    #[error("invalid permutation {0:?}")]
    InvalidPermutation(Vec<usize>),

    #[error("tensor network is disconnected: {0}")]
    DisconnectedNetwork(String),

    #[error("dangling leg: {0}")]
    DanglingLeg(String),

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("invalid rank {0}: rank must be at least 1")]
    InvalidRank(usize),

    #[error("factorization mismatch: {0}")]
    Factorization(String),

    #[error("wrong adapter kind: expected {expected}, found {found}")]
    WrongAdapterKind { expected: String, found: String },

    #[error("adapter not initialized")]
    UninitializedAdapter,

    #[error("gradient error: {0}")]
    Gradient(String),

    #[error("unknown target module {0:?}")]
    UnknownTarget(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("{}: {source}", path.display())]
    File {
        path: std::path::PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// An I/O failure on `path`.
    pub fn file(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::File {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
