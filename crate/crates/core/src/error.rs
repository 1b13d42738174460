use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("dangling reference: {kind} '{id}' referenced from {from}")]
    DanglingReference { kind: &'static str, id: String, from: String },

    #[error("inconsistent links: {0}")]
    InconsistentLinks(String),

    #[error("timestamps not strictly increasing: {0}")]
    NonMonotoneTimestamps(String),

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("unknown {kind} '{id}'")]
    UnknownId { kind: &'static str, id: String },

    #[error("agent '{agent}' not visible at frame {frame}")]
    NotVisible { agent: String, frame: usize },

    #[error("insufficient history: needed {needed} samples, found {found}")]
    InsufficientHistory { needed: usize, found: usize },

    #[error("insufficient future: needed {needed} samples, found {found}")]
    InsufficientFuture { needed: usize, found: usize },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("empty candidate list")]
    EmptyCandidates,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),
}
