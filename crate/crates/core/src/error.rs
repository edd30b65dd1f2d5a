use thiserror::Error;

/// Errors raised by solvers, checks and the configuration layer.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("degenerate regression at step {step}: normal equations are singular")]
    DegenerateRegression { step: usize },

    #[error("non-finite value produced at step {step}")]
    Overflow { step: usize },

    #[error("terminal claim below floor at step {step}, index {index}: {value} < {floor}")]
    TerminalBelowFloor {
        step: usize,
        index: usize,
        value: f64,
        floor: f64,
    },

    #[error("backend mismatch: {0}")]
    Backend(String),

    #[error("unsupported generator: {0}")]
    Generator(String),

    #[error("generator metadata violated: {0}")]
    GeneratorViolation(String),

    #[error("obstacle metadata violated: {0}")]
    ObstacleViolation(String),

    #[error("unknown axiom id `{0}`")]
    UnknownAxiom(String),

    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    /// True for errors that originate in the numerics rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateRegression { .. } | Error::Overflow { .. }
        )
    }
}
