use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("switch integrity violated: {0}")]
    Integrity(String),

    #[error("layer state error: {0}")]
    State(String),

    #[error("loss error: {0}")]
    Loss(String),

    #[error("network config error: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("training error at iteration {iteration}: {message}")]
    Training { iteration: u64, message: String },

    #[error("inference error: {0}")]
    Inference(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
