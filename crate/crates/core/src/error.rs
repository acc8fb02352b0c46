use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid feature spec: {0}")]
    InvalidSpec(String),

    #[error("class balance requires an even sample count, got {0}")]
    ClassBalance(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("sample is already counterfactually edited (pair {pair_id:?})")]
    AlreadyEdited { pair_id: Option<u64> },

    #[error("class {label:+} has {count} samples, at least 2 are required")]
    InsufficientData { label: i8, count: usize },

    #[error("within-class scatter is zero in dimension {dim}")]
    Singular { dim: usize },

    #[error("angle undefined for a zero-norm weight vector ({0})")]
    ZeroNorm(&'static str),

    #[error("lambda {0} outside [0, 1]")]
    LambdaDomain(f64),

    #[error(
        "degenerate spec: |phi_u| = |phi_r| = 0, so phi_ori = phi_cad and every lambda is optimal"
    )]
    DegenerateInterpolation,

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("IRM penalty needs at least 2 environments, got {0}")]
    TooFewEnvironments(usize),

    #[error("label vector for class {class} has zero norm; orthogonal projection undefined")]
    DegenerateClassifier { class: usize },

    #[error("counterfactual pair {index} has matching labels")]
    PairLabels { index: usize },

    #[error(
        "training diverged at epoch {epoch} (learning_rate = {learning_rate}): non-finite {what}"
    )]
    Divergence {
        epoch: usize,
        learning_rate: f64,
        what: &'static str,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}
