use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("non-finite input to {op}")]
    NonFiniteInput { op: &'static str },
    #[error("loss is not a scalar (shape {shape:?})")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("node does not belong to this tape")]
    DetachedNode,
    #[error("{what}")]
    Invalid { what: String },
    #[error("batch normalization requires batch size >= 2 in train mode, got {got}")]
    BatchTooSmall { got: usize },
    #[error("model has not completed its warm-up epoch")]
    NotWarmedUp,
    #[error("preservation set is empty")]
    EmptyPreservationSet,
    #[error("quotas {0:?} do not sum to 1")]
    BadQuotas([f32; 3]),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
    #[error("{path}: bad magic (expected {expected:#010x}, got {got:#010x})")]
    BadMagic {
        path: String,
        expected: u32,
        got: u32,
    },
    #[error("image/label count mismatch: {images} images, {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: truncated payload (need {need} bytes, have {have})")]
    Truncated {
        path: String,
        need: usize,
        have: usize,
    },
    #[error("checkpoint version mismatch: expected {expected}, got {got}")]
    VersionMismatch { expected: u16, got: u16 },
    #[error("checkpoint tensor {name}: shape {header:?} does not match payload/model {actual:?}")]
    CheckpointShape {
        name: String,
        header: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
