use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape mismatch, bad id, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// The data itself is unusable (non-finite values, empty inputs).
    #[error("invalid input: {0}")]
    Input(String),

    /// A file did not match its binary or text layout.
    #[error("format error: {0}")]
    Format(String),

    #[error("index is frozen; no further postings may be inserted")]
    Frozen,

    #[error(
        "out-of-order posting for layer {layer} feature {feature}: position {position} is not after {last}"
    )]
    OutOfOrder {
        layer: u32,
        feature: u32,
        position: u64,
        last: u64,
    },

    #[error("unknown layer id {0}")]
    UnknownLayer(u32),

    #[error("SAE fingerprint mismatch: index was built with {expected}, got {actual}")]
    FingerprintMismatch { expected: String, actual: String },

    #[error("unknown retriever '{name}' (available: {available})")]
    UnknownRetriever { name: String, available: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Format(_) => 2,
            Error::Contract(_)
            | Error::Frozen
            | Error::OutOfOrder { .. }
            | Error::UnknownLayer(_)
            | Error::FingerprintMismatch { .. } => 3,
            Error::Input(_) | Error::UnknownRetriever { .. } | Error::Io(_) => 1,
        }
    }
}
