use thiserror::Error;

/// Every failure the library can surface.
#[derive(Debug, Error)]
pub enum DmeaError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid sample: {0}")]
    InvalidSample(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("routing error: {0}")]
    Routing(String),

    #[error("training failure: {0}")]
    TrainingFailure(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("finite-difference oracle failure: {0}")]
    OracleFailure(String),

    #[error("stage `{stage}` failed on task {task}: {source}")]
    StageFailure {
        stage: &'static str,
        task: String,
        #[source]
        source: Box<DmeaError>,
    },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = DmeaError> = std::result::Result<T, E>;

impl DmeaError {
    pub(crate) fn in_stage(self, stage: &'static str, task: impl Into<String>) -> Self {
        DmeaError::StageFailure {
            stage,
            task: task.into(),
            source: Box::new(self),
        }
    }
}
