use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("input text is empty after tokenization")]
    EmptyText,

    #[error("sequence of length {got} exceeds the maximum length {max}")]
    SequenceTooLong { got: usize, max: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("layer {layer} out of range; model has layers 0..={max}")]
    InvalidLayer { layer: usize, max: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("step count {steps} is invalid for the {scheme} scheme")]
    InvalidSteps { steps: usize, scheme: String },

    #[error("interpolation index {index} out of range 1..={steps}")]
    StepOutOfRange { index: usize, steps: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("non-finite values produced by layer {layer}")]
    NonFinite { layer: usize },

    #[error("cosine similarity is undefined for a zero-norm embedding")]
    ZeroNorm,

    #[error("model does not use shifted scoring; attribution requires an adjusted model")]
    NotAdjusted,

    #[error("{path}:{line}: {message}")]
    Data {
        path: String,
        line: usize,
        message: String,
    },

    #[error("dataset {0} contains no pairs")]
    EmptyDataset(String),

    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },

    #[error("inputs must have equal length of at least 2 (got {a} and {b})")]
    BadSampleLengths { a: usize, b: usize },

    #[error("rank correlation is undefined for constant input")]
    ConstantInput,

    #[error("prediction score is zero; normalized output is undefined")]
    ZeroScore,

    #[error("word spans do not partition the token axis: {0}")]
    BadAlignment(String),

    #[error("missing POS tag: {0}")]
    MissingTag(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable process exit code contract: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. }
            | Error::ZeroNorm
            | Error::NanLoss { .. }
            | Error::ConstantInput
            | Error::ZeroScore => 3,
            _ => 2,
        }
    }
}
