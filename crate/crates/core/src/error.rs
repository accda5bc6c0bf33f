use std::path::PathBuf;

use gantruth_tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("dataset {path} is unusable: {reason}")]
    Dataset { path: PathBuf, reason: String },
    #[error("label mapping: {0}")]
    Mapping(String),
    #[error("class id {id} has no entry in mapping `{mapping}`")]
    UnmappedId { id: u32, mapping: String },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("loss term `{term}` is not finite ({value}) at step {step}")]
    NonFiniteLoss { term: String, value: f64, step: u64 },
    #[error("no estimator provided for enabled task `{0}`")]
    MissingEstimator(String),
    #[error("{metric} = {value:.4} does not meet floor {floor:.4} after {steps} steps")]
    MetricFloor { metric: String, value: f64, floor: f64, steps: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format { path: path.into(), message: message.to_string() }
    }
}
