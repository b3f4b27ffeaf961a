use thiserror::Error;

pub type Result<T, E = VqdError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum VqdError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("degenerate mask: row {row} has no allowed column")]
    DegenerateMask { row: usize },

    #[error("backward already ran on this tape; build a new graph for the next step")]
    DoubleBackward,

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),

    #[error("category {category} out of range for {num_classes} classes")]
    Category { category: usize, num_classes: usize },

    #[error("count mismatch: {0}")]
    CountMismatch(String),

    #[error("attention row {row} is not stochastic (sum {sum})")]
    NotStochastic { row: usize, sum: f64 },

    #[error("average precision is undefined without ground truths")]
    NoGroundTruth,

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
