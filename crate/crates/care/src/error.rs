use thiserror::Error;

/// Errors raised by tensor ops and the training/evaluation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("cross_entropy mask selects no positions")]
    EmptyMask,

    #[error("target id {id} out of vocab {vocab}")]
    TargetOutOfVocab { id: usize, vocab: usize },

    #[error("non-deterministic loss: two forward passes disagree ({a} vs {b})")]
    NonDeterministic { a: f64, b: f64 },

    #[error("input length {len} exceeds max_seq_len {max}")]
    Overlength { len: usize, max: usize },

    #[error("empty prompt")]
    EmptyPrompt,

    #[error("memory token count {got} does not match memory bank rows {want}")]
    MemoryCountMismatch { got: usize, want: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    #[error("checkpoint corrupt: {0}")]
    Checkpoint(String),

    #[error("missing artifact {path}; run `{stage}` first")]
    MissingArtifact { path: String, stage: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
