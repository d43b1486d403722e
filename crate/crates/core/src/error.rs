use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("rotation angle too close to pi for a unique logarithm (trace = {trace})")]
    AngleNearPi { trace: f64 },
    #[error("pitch too close to +-pi/2 for roll-pitch-yaw extraction (cos(pitch) = {cos_pitch})")]
    GimbalLock { cos_pitch: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("degenerate path segment {index}: consecutive via-points coincide")]
    DegenerateSegment { index: usize },
    #[error("path parameter {value} outside [{min}, {max}]")]
    OutOfRange { value: f64, min: f64, max: f64 },
    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue})")]
    NotPsd { min_eigenvalue: f64 },
    #[error("kernel matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("lower bound target exceeds upper bound target")]
    InvertedBounds,
    #[error("infeasible bounds: lower > upper for {what}")]
    InfeasibleBounds { what: String },
    #[error("warm start contains non-finite values")]
    BadWarmStart,
    #[error("QP solver hit the iteration limit ({iterations}) with residual {residual:e}")]
    MaxIterations { iterations: usize, residual: f64 },
    #[error("QP is infeasible")]
    Infeasible,
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("parse error in {location}: {message}")]
    Parse { location: String, message: String },
    #[error("validation error: {field}: {message}")]
    Validation { field: String, message: String },
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
