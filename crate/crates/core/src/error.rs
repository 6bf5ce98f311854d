use thiserror::Error;

#[derive(Debug, Error)]
pub enum DdadError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("timestep {t} outside 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss ({value}) at {context}")]
    NonFiniteLoss { value: f64, context: String },
    #[error("checkpoint is corrupt: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint schedule {found} does not match runtime schedule {expected}")]
    ScheduleMismatch { expected: String, found: String },
    #[error("layer {layer} not available (backbone has {depth} blocks)")]
    LayerOutOfRange { layer: usize, depth: usize },
    #[error("metric undefined: {0}")]
    Metric(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = DdadError> = std::result::Result<T, E>;

pub(crate) fn check_shape(expected: &[usize], got: &[usize]) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(DdadError::ShapeMismatch { expected: expected.to_vec(), got: got.to_vec() })
    }
}
