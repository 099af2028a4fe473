use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector or row {row} has near-zero norm")]
    ZeroNorm { row: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("series is constant or too short for a correlation")]
    DegenerateSeries,

    #[error("eigensolver did not converge within {budget} sweeps")]
    NoConvergence { budget: usize },

    #[error("non-finite matrix entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("loss is not finite (temperature too small for the similarity range?)")]
    NonFiniteLoss,

    #[error("objective needs hard negatives but the batch has none")]
    MissingHardNegatives,

    #[error("row {row} is not unit-normalized (norm {norm})")]
    NotNormalized { row: usize, norm: f64 },

    #[error("uniformity needs at least two points")]
    NeedTwoPoints,

    #[error("invalid dropout plan: {0}")]
    InvalidPlan(String),

    #[error("sequence of length {len} exceeds max_len {max_len}")]
    LengthOverflow { len: usize, max_len: usize },

    #[error("backward pass requested with a different dropout plan than the forward pass")]
    PlanMismatch,

    #[error("sentence too short for the operator (length {len})")]
    TooShort { len: usize },

    #[error("no token in the sentence has a synonym entry")]
    NoReplaceableToken,

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("line {line}: expected {expected} tab-separated columns, found {found}")]
    BadColumnCount {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("line {line}: score {score} outside [0, 5]")]
    ScoreOutOfRange { line: usize, score: f64 },

    #[error("line {line}: cannot parse score {text:?}")]
    BadScore { line: usize, text: String },

    #[error("vocab of size {vocab_size} is too small for {n_clusters} clusters")]
    VocabTooSmall { vocab_size: usize, n_clusters: usize },

    #[error("objective does not match the training data: {0}")]
    ObjectiveDataMismatch(String),

    #[error("training diverged at step {step} (non-finite loss or gradient)")]
    Diverged {
        step: u64,
        last_good: Box<crate::train::Checkpoint>,
    },

    #[error("no pair passes the selection threshold")]
    EmptySelection,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
