use thiserror::Error;

/// Errors raised by the solvers, the trainer and the file formats.
#[derive(Debug, Error)]
pub enum StefanError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("interface equation has no sign change on ({lo}, {hi}]")]
    NoRootBracket { lo: f64, hi: f64 },

    #[error("Newton iteration did not converge (step {step:?}, residual {residual:e} after {iterations} iterations)")]
    NewtonDiverged {
        step: Option<usize>,
        iterations: usize,
        residual: f64,
    },

    #[error("singular tridiagonal Jacobian: pivot {pivot:e} at row {row}")]
    SingularJacobian { row: usize, pivot: f64 },

    #[error("time window {window} is not an integer multiple of the stage length {dt_seq}")]
    NonIntegerStages { window: f64, dt_seq: f64 },

    #[error("mean absolute gradient is zero; weight left unchanged")]
    DegenerateStats,

    #[error("non-finite loss at iteration {iteration}")]
    NanLoss { iteration: usize },

    #[error("reference field has zero norm")]
    ZeroReference,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl StefanError {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            StefanError::NoRootBracket { .. }
                | StefanError::NewtonDiverged { .. }
                | StefanError::SingularJacobian { .. }
                | StefanError::DegenerateStats
                | StefanError::NanLoss { .. }
                | StefanError::ZeroReference
        )
    }
}

pub type Result<T, E = StefanError> = std::result::Result<T, E>;
