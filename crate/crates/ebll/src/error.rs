use crate::data::{SampleId, TaskId};

pub type Result<T> = std::result::Result<T, Error>;

/// Error type shared by all modules of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{which} is not normalized: entries sum to {sum}")]
    NotNormalized { which: String, sum: f64 },

    #[error("unknown task {0}")]
    UnknownTask(TaskId),

    #[error("task {0} already has a head")]
    DuplicateTask(TaskId),

    #[error("no trained encoder stored for past task {0}")]
    MissingEncoder(TaskId),

    #[error("sample {0} has no recorded entry for past task {1}")]
    MemoryIntegrity(SampleId, TaskId),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    /// Non-finite value observed where training must abort (exit code 3).
    #[error("non-finite {what} in {name}")]
    NonFinite { what: &'static str, name: String },

    /// Configuration parse/validation failure (exit code 2).
    #[error("config error: {0}")]
    Config(String),

    /// A checkpoint referenced by a command does not exist (exit code 4).
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),

    #[error("checkpoint magic mismatch: found {found:?}")]
    CheckpointMagic { found: [u8; 4] },

    #[error("checkpoint format version mismatch: found {found}, supported {supported}")]
    CheckpointVersion { found: u16, supported: u16 },

    #[error("checkpoint truncated while reading {context}")]
    CheckpointTruncated { context: String },

    #[error("idx magic mismatch in {path}: found {found:#010x}, expected {expected:#010x}")]
    IdxMagic {
        path: String,
        found: u32,
        expected: u32,
    },

    #[error("idx payload truncated in {path}: need {needed} bytes, have {have}")]
    IdxTruncated {
        path: String,
        needed: usize,
        have: usize,
    },

    #[error("idx sample count mismatch: images file has {images}, labels file has {labels}")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) => 2,
            Error::NonFinite { .. } => 3,
            Error::MissingCheckpoint(_) => 4,
            _ => 1,
        }
    }
}
