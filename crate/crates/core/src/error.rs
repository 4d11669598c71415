use thiserror::Error;

/// Errors raised while validating or constructing model values.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("unknown model name `{0}`")]
    UnknownModel(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Errors raised by the GEM fitting loop.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("component {component} degenerated at iteration {iteration} (n_g = {size:.3e})")]
    DegenerateComponent {
        component: usize,
        iteration: usize,
        size: f64,
    },
    #[error("scale matrix became singular at iteration {iteration}")]
    SingularScale { iteration: usize },
    #[error("log-likelihood became non-finite at iteration {iteration}")]
    NonFiniteLikelihood { iteration: usize },
    #[error("observation {row} has zero density under every component")]
    AllComponentsUnderflow { row: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl FitError {
    /// Short machine-readable tag used in reports.
    pub fn kind(&self) -> &'static str {
        match self {
            FitError::DegenerateComponent { .. } => "DegenerateComponent",
            FitError::SingularScale { .. } => "SingularScale",
            FitError::NonFiniteLikelihood { .. } => "NonFiniteLikelihood",
            FitError::AllComponentsUnderflow { .. } => "AllComponentsUnderflow",
            FitError::Model(_) => "InvalidModel",
        }
    }
}

/// Errors from data ingestion and serialization.
#[derive(Debug, Error)]
pub enum IoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("empty input")]
    Empty,
    #[error("row {row}: expected {expected} columns, found {found}")]
    Ragged {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("row {row}, column {column}: `{value}` is not a finite number")]
    NonNumeric {
        row: usize,
        column: usize,
        value: String,
    },
    #[error("column {column} has zero variance")]
    ZeroVariance { column: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Errors from clustering utilities and the model-family search.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectionError {
    #[error("need at least {needed} observations, got {actual}")]
    TooFewObservations { needed: usize, actual: usize },
    #[error("label vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("every model fit failed; first error: {0}")]
    AllFitsFailed(String),
    #[error("empty search grid")]
    EmptyGrid,
    #[error(transparent)]
    Model(#[from] ModelError),
}
