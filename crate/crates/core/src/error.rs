use thiserror::Error;

/// Errors produced by the solver library.
#[derive(Debug, Error)]
pub enum Error {
    /// A raw input sample fell outside the declared code range.
    #[error("input value {value} at index {index} outside [0, {max_code}]")]
    InputRange {
        index: usize,
        value: i64,
        max_code: u32,
    },

    /// A parameter violated one of the model inequalities. The message names
    /// the violated inequality, e.g. "delta^2/alpha - lambda > 0".
    #[error("parameter constraint violated: {0}")]
    Parameter(String),

    /// Two fields that must share a lattice did not.
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: String, right: String },

    /// relative_difference against a zero-norm reference.
    #[error("degenerate reference field: ||ref||_2 = 0")]
    DegenerateReference,

    /// A field handed to the kernel-based scheme carried a value that is not
    /// a quantization level.
    #[error("value {value} at index {index} is not on the quantization partition")]
    OffPartition { index: usize, value: f64 },

    /// The iterative linear solver hit its iteration cap.
    #[error("linear solver did not converge: residual {residual:.3e} after {iterations} iterations (target {target:.3e})")]
    SolverDiverged {
        iterations: usize,
        residual: f64,
        target: f64,
    },

    /// delta estimation over an empty brain mask.
    #[error("brain mask is empty; cannot estimate delta")]
    EmptyMask,
}

pub type Result<T> = std::result::Result<T, Error>;
