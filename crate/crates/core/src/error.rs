use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the estimator, simulator, and tooling.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("timestamps not strictly increasing at index {index} ({prev} >= {next})")]
    NonMonotone { index: usize, prev: f64, next: f64 },

    #[error("singular normal equations: {0}")]
    Singular(String),

    #[error("derivative order {0} not supported (expected 1 or 2)")]
    DerivativeOrder(u8),

    #[error("unobservable velocity axis (direction matrix eigenvalue ratio {ratio:.3e})")]
    UnobservableAxis { ratio: f64 },

    #[error("ego-velocity rejected: {0}")]
    EgoVelocityRejected(String),

    #[error("initialization refused: {0}")]
    InitRefused(String),

    #[error("covariance is not symmetric positive definite")]
    NotPositiveDefinite,

    #[error("bias moved {0:.3} from its linearization point; re-preintegration required")]
    RepreintegrationRequired(f64),

    #[error("keyframe at t={new} is not newer than t={newest}")]
    OutOfOrder { newest: f64, new: f64 },

    #[error("optimizer failed: {0}")]
    Solver(String),

    #[error("time {t} outside [{start}, {end}]")]
    OutOfRange { t: f64, start: f64, end: f64 },

    #[error("trajectories do not overlap in time")]
    EmptyOverlap,

    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("missing input file {0}")]
    MissingInput(PathBuf),

    #[error("malformed {what}: {message}")]
    Malformed { what: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag used in the CLI's error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Degenerate(_) => "degenerate",
            Error::TooFewSamples { .. } => "too_few_samples",
            Error::NonMonotone { .. } => "non_monotone",
            Error::Singular(_) => "singular",
            Error::DerivativeOrder(_) => "derivative_order",
            Error::UnobservableAxis { .. } => "unobservable_axis",
            Error::EgoVelocityRejected(_) => "egovel_rejected",
            Error::InitRefused(_) => "init_refused",
            Error::NotPositiveDefinite => "not_spd",
            Error::RepreintegrationRequired(_) => "repreintegrate",
            Error::OutOfOrder { .. } => "out_of_order",
            Error::Solver(_) => "solver",
            Error::OutOfRange { .. } => "out_of_range",
            Error::EmptyOverlap => "empty_overlap",
            Error::Config { .. } => "config",
            Error::MissingInput(_) => "missing_input",
            Error::Malformed { .. } => "malformed",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
