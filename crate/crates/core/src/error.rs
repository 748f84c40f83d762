use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("difficulty table has no entry for class {class} with view mode {view_mode}")]
    MissingScore { class: usize, view_mode: String },

    #[error("invalid difficulty score {score} at index {index}: scores must be positive")]
    InvalidScore { index: usize, score: f64 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("sample `{id}` is missing its {view} image: {}", .path.display())]
    MissingView { id: String, view: String, path: PathBuf },

    #[error("unreadable image {}: {reason}", .path.display())]
    UnreadableImage { path: PathBuf, reason: String },

    #[error("manifest row {row}: label {label} is outside {{0, 1, 2}}")]
    LabelDomain { row: usize, label: String },

    #[error("manifest row {row}: duplicate sample id `{id}`")]
    DuplicateId { row: usize, id: String },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("class {class} has {count} samples, fewer than the {folds} folds requested")]
    InfeasibleStratification { class: usize, count: usize, folds: usize },

    #[error("at least one view must be supplied")]
    MissingInput,

    #[error("shape mismatch for {what}: expected {expected}, got {actual}")]
    Shape {
        what: String,
        expected: String,
        actual: String,
    },

    #[error("training requires {0}")]
    TrainingContract(String),

    #[error("transfer failed at `{layer}`: expected shape {expected:?}, source has {actual:?}")]
    Transfer {
        layer: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NumericalFailure { epoch: usize, batch: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the command-line runner.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_)
            | Error::MissingScore { .. }
            | Error::InvalidScore { .. }
            | Error::Shape { .. }
            | Error::TrainingContract(_)
            | Error::Transfer { .. }
            | Error::Json(_) => 2,
            Error::NumericalFailure { .. } => 4,
            _ => 3,
        }
    }
}
