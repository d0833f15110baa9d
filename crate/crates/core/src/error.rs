use thiserror::Error;

/// Errors raised anywhere in the parsing, windowing and model pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("empty log line")]
    EmptyLine,
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("attention mask selects no positions")]
    EmptyMask,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("key id {id} out of range for vocabulary of size {vocab}")]
    IdOutOfRange { id: usize, vocab: usize },
    #[error("sequence length {len} exceeds model maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("unknown LoRA target module `{0}` (expected q_proj, k_proj or v_proj)")]
    UnknownTarget(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("model has no trainable parameters")]
    NoTrainableParams,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    EmptyInput,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}
