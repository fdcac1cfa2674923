use thiserror::Error;

use crate::tensor::TensorError;

/// Errors surfaced by the library outside the tensor engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate user_id {0:?}")]
    DuplicateUser(String),
    #[error("invalid record for user {user:?}: {msg}")]
    InvalidRecord { user: String, msg: String },
    #[error("empty input")]
    EmptyInput,
    #[error("sequence of {len} tokens exceeds max_seq {max}")]
    TooLong { len: usize, max: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("adapter position {0} is not part of this model")]
    UnknownPosition(String),
    #[error("adapter set is missing position {0}")]
    MissingPosition(String),
    #[error("rank mismatch: expected {expected}, found {found}")]
    RankMismatch { expected: usize, found: usize },
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("adapter built for different base (file {file:08x}, base {base:08x})")]
    BaseChecksum { file: u32, base: u32 },
    #[error("{kind} file: {msg}")]
    Format { kind: &'static str, msg: String },
    #[error("cold user {0:?}: no history and no profile")]
    ColdUser(String),
    #[error("unknown profile: no embedding stored for hash {0:016x}")]
    UnknownProfile(u64),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("non-finite loss at step {step} (user {user:?})")]
    NonFiniteLoss { step: usize, user: String },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
