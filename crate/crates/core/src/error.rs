use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the fitting, simulation and evaluation pipeline.
#[derive(Debug, Error)]
pub enum EtasError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("catalog format error: missing column `{0}`")]
    MissingColumn(String),

    #[error("catalog format error at line {line}: {message}")]
    BadRow { line: usize, message: String },

    #[error("catalog is empty after filtering")]
    EmptyCatalog,

    #[error("boundary parse error: {0}")]
    BoundaryParse(String),

    #[error("no boundary segments fall inside the domain")]
    EmptyPolyline,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("grid does not cover the sample: {0}")]
    Coverage(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("zero conditional intensity at event {event}")]
    ZeroIntensity { event: usize },

    #[error("event {index} at ({lon}, {lat}) lies outside the forecast grid")]
    OutsideGrid { index: usize, lon: f64, lat: f64 },

    #[error("ROC undefined: {0}")]
    UndefinedRoc(String),

    #[error("bootstrap variance is zero: the two score sets agree on every resample")]
    DegenerateVariance,

    #[error("scored cell sets are not aligned: {0}")]
    Alignment(String),

    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = EtasError> = std::result::Result<T, E>;

impl EtasError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EtasError::Io {
            path: path.into(),
            source,
        }
    }
}
