use thiserror::Error;

/// Errors raised by the volex numerical kernels.
#[derive(Debug, Error)]
pub enum VolexError {
    /// Mismatched lengths, grids or shapes between inputs.
    #[error("structural error: {0}")]
    Structural(String),
    /// An argument lies outside the domain where the quantity is defined.
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    /// Parameter combination outside the regimes covered by a closed form.
    #[error("unsupported regime: {0}")]
    UnsupportedRegime(String),
    #[error("quadrature failure: {0}")]
    Quadrature(String),
    /// The PDE time stepper could not complete a step.
    #[error("solver failure at step {step} (t = {t}): {reason}")]
    Solver { step: usize, t: f64, reason: String },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, VolexError>;

impl VolexError {
    /// True for failures that originate in the numerics rather than in the
    /// inputs (used by front ends to pick an exit status).
    pub fn is_numerical(&self) -> bool {
        matches!(self, VolexError::Solver { .. } | VolexError::Quadrature(_))
    }
}
