use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("time {t} outside [{start}, {end}]")]
    TimeOutOfRange { t: f64, start: f64, end: f64 },

    #[error("divergence is singular at x = {x}; use the finite-difference mode")]
    SingularDivergence { x: f64 },

    #[error("non-finite state at step {step} (t = {t})")]
    NonFiniteState { step: usize, t: f64 },

    #[error("point {y} outside image interval [{lo}, {hi}]")]
    OutOfImage { y: f64, lo: f64, hi: f64 },

    #[error("point {0:?} outside the image mesh")]
    OutOfMesh(Vec<f64>),

    #[error("grid point {index} has no neighbor on both sides")]
    BoundaryPoint { index: usize },

    #[error("singular tridiagonal system at row {row}")]
    SingularSystem { row: usize },

    #[error(
        "sup|Dpsi| = {grad_sup:.4} >= 1 at lambda = {lambda}; retry with lambda >= {suggested}"
    )]
    TransformNotInvertible {
        grad_sup: f64,
        lambda: f64,
        suggested: f64,
    },

    #[error("trajectory left [-{half_width}, {half_width}] at t = {t}; enlarge L")]
    DomainExit { t: f64, half_width: f64 },

    #[error(
        "quadrature box [{have_lo}, {have_hi}] does not cover required [{need_lo}, {need_hi}]"
    )]
    QuadratureBox {
        have_lo: f64,
        have_hi: f64,
        need_lo: f64,
        need_hi: f64,
    },

    #[error("maximum principle violated at t = {t}: value {value} outside [{lo}, {hi}]")]
    MaximumPrinciple {
        t: f64,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("path has no provenance and cannot be serialized")]
    NoProvenance,

    #[error("unknown experiment `{0}`")]
    UnknownExperiment(String),

    #[error("unknown series `{0}`")]
    UnknownSeries(String),

    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> LabError {
    LabError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
