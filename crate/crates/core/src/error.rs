use thiserror::Error;

#[derive(Debug, Error)]
pub enum FhmmError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("product state space has {size} joint states, above the cap of {cap}")]
    Capacity { size: usize, cap: usize },

    #[error("forward mass vanished at sequence {sequence}, t={time}, layer {layer}")]
    Underflow {
        sequence: usize,
        time: usize,
        layer: usize,
    },

    #[error("variational state is missing marginals for layer {0}")]
    MissingMarginals(usize),

    #[error("state {state} of layer {layer} has zero mass and must be pruned")]
    MustPrune { layer: usize, state: usize },

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<FhmmError>,
    },

    #[error("parse error (format v{version}): {message}")]
    Parse { version: u32, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, FhmmError>;

impl FhmmError {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            FhmmError::Shape(_) => "shape",
            FhmmError::Parameter(_) => "parameter",
            FhmmError::Capacity { .. } => "capacity",
            FhmmError::Underflow { .. } => "underflow",
            FhmmError::MissingMarginals(_) => "missing_marginals",
            FhmmError::MustPrune { .. } => "must_prune",
            FhmmError::AtIteration { source, .. } => source.kind(),
            FhmmError::Parse { .. } => "parse",
            FhmmError::Io(_) => "io",
            FhmmError::Json(_) => "json",
            FhmmError::Csv(_) => "csv",
        }
    }
}
