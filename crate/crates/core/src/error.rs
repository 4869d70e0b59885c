use thiserror::Error;

/// Errors produced by the calibration library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid ellipsoid shape: {0}")]
    InvalidShape(String),

    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("observer is on or inside the ellipsoid (r^T A r = {0}), no horizon exists")]
    NoHorizon(f64),

    #[error("degenerate conic: {0}")]
    DegenerateConic(String),

    #[error("conic is not a real ellipse: {0}")]
    NotEllipse(String),

    #[error("insufficient points: got {got}, need at least {need}")]
    InsufficientPoints { got: usize, need: usize },

    #[error("degenerate point data: {0}")]
    DegenerateData(String),

    #[error("fitted conic is not an ellipse: {0}")]
    NonEllipticalFit(String),

    /// Algorithm line 1 or 2: the upper-left block has zero trace.
    #[error("calibration line {line}: indefinite 2x2 block ({detail})")]
    IndefiniteBlock { line: u8, detail: String },

    /// Algorithm line 6 or 7: Cholesky factorization failed.
    #[error("calibration line {line}: block not positive definite ({detail})")]
    NotPositiveDefinite { line: u8, detail: String },

    /// Algorithm line 5 or 9: a determinant in a denominator vanished.
    #[error("calibration line {line}: {detail}")]
    Singular { line: u8, detail: String },

    #[error("invalid sensor: {0}")]
    InvalidSensor(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid sweep: {0}")]
    InvalidSweep(String),

    #[error("scene rejected: {0}")]
    SceneRejected(String),

    #[error("scene configuration infeasible: {0}")]
    ConfigInfeasible(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Coarse classification used by the CLI to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Domain,
    Io,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io(_) => ErrorKind::Io,
            Error::Json(e) if e.is_io() => ErrorKind::Io,
            Error::Csv(e) if matches!(e.kind(), csv::ErrorKind::Io(_)) => ErrorKind::Io,
            Error::Json(_)
            | Error::Csv(_)
            | Error::InvalidConfig(_)
            | Error::ConfigInfeasible(_)
            | Error::InvalidSweep(_)
            | Error::InvalidSensor(_) => ErrorKind::Config,
            _ => ErrorKind::Domain,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
