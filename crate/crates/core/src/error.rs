use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("parameter layouts differ")]
    ShapeMismatch,

    #[error("aggregation weights must be non-negative and not all zero")]
    InvalidWeights,

    #[error("nothing to aggregate")]
    NoModels,

    #[error("site `{0}` has an empty training set")]
    EmptyTrainingSet(String),

    #[error("empty holdout set")]
    EmptyHoldout,

    #[error("invalid cohort config: {0}")]
    InvalidCohort(String),

    #[error("site `{site}` has {size} training examples, cannot split {k} ways")]
    SiteTooSmall { site: String, size: usize, k: usize },

    #[error("subgroup filter `{0}` leaves no data in any site")]
    EmptySubgroup(String),

    #[error("generator cannot be fit: class {0} has fewer than 2 training examples in the public site")]
    MissingClass(usize),

    #[error("unknown site `{0}`")]
    UnknownSite(String),

    #[error("invalid federation config: {0}")]
    InvalidFederation(String),

    #[error("invalid path schedule: {0}")]
    InvalidPath(String),

    #[error("key sets differ between accuracies and {0}")]
    KeyMismatch(&'static str),

    #[error("model has no hidden layer to export")]
    NoHiddenLayer,

    #[error("malformed record at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    InvalidConfig(#[from] crate::config::ConfigErrors),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
