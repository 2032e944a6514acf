use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("vocabulary mismatch: expected hash {expected}, found {found}")]
    VocabMismatch { expected: String, found: String },

    #[error("schema mismatch in {path}: {reason}")]
    Schema { path: PathBuf, reason: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty data: {0}")]
    EmptyData(String),

    #[error("no high-confidence comparisons")]
    NoComparisons,

    #[error("no valid 2-class samples")]
    NoTwoClassSamples,

    #[error("missing ground truth for sample {0}")]
    MissingGroundTruth(String),

    #[error("task {task} has {got} votes, expected {expected}")]
    VoteCount {
        task: String,
        got: usize,
        expected: usize,
    },

    #[error("unknown reference: {0}")]
    Unknown(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier used by the CLI's machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::OutOfRange(_) => "out_of_range",
            Error::Config(_) => "config",
            Error::VocabMismatch { .. } => "vocab_mismatch",
            Error::Schema { .. } => "schema_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::EmptyData(_) => "empty_data",
            Error::NoComparisons => "no_comparisons",
            Error::NoTwoClassSamples => "no_two_class_samples",
            Error::MissingGroundTruth(_) => "missing_ground_truth",
            Error::VoteCount { .. } => "vote_count",
            Error::Unknown(_) => "unknown",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
