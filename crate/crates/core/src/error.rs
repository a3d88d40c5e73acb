use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("heatmap has no finite values")]
    AllNan,
    #[error("too few samples for {components} component(s): need {needed}, got {got}")]
    TooFewSamples {
        components: usize,
        needed: usize,
        got: usize,
    },
    #[error("no labeled joints")]
    NoLabeledJoints,
    #[error("empty input: {0}")]
    Empty(String),
    #[error("loss diverged at {stage} step {step}")]
    Divergence { stage: &'static str, step: usize },
    #[error("parse error in {record}: {message}")]
    Parse { record: String, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}: {source}")]
    File {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag used in CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidGrid(_) => "invalid_grid",
            Error::GridMismatch(_) => "grid_mismatch",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::AllNan => "all_nan",
            Error::TooFewSamples { .. } => "too_few_samples",
            Error::NoLabeledJoints => "no_labeled_joints",
            Error::Empty(_) => "empty",
            Error::Divergence { .. } => "divergence",
            Error::Parse { .. } => "parse",
            Error::Config(_) => "config",
            Error::Io(_) | Error::File { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Attaches a path to an I/O error.
pub(crate) fn file_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::File {
        path: path.display().to_string(),
        source,
    }
}
