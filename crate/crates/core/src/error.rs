use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate annotation: {0}")]
    DegenerateAnnotation(String),
    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),
    #[error("category {index} out of range for {n_c} categories")]
    InvalidCategory { index: usize, n_c: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("loss report is missing term `{0}`")]
    IncompleteReport(&'static str),
    #[error("image `{0}` has no annotation record")]
    MissingAnnotation(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("epoch {epoch} outside schedule of {total} epochs")]
    InvalidEpoch { epoch: usize, total: usize },
    #[error("need at least 2 samples per feature set, got {0}")]
    InsufficientSamples(usize),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),
    #[error("training labels contain a single class")]
    DegenerateLabels,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
