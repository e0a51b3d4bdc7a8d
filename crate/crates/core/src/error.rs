use thiserror::Error;

/// Every failure the solver can surface.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite state at step {step} (t = {time})")]
    NonFiniteState { step: usize, time: f64 },

    #[error("policy failure: {0}")]
    PolicyFailure(String),

    #[error("no valid lambda: {0}")]
    NoValidLambda(String),

    #[error("singular gain matrix (condition number {condition:e})")]
    SingularGain { condition: f64 },

    #[error("degenerate rollout batch: all weights underflowed")]
    DegenerateBatch,

    #[error("unstable PDE solve: {0}")]
    UnstableSolve(String),

    #[error("finite-difference stencil leaves the grid domain at {0:?}")]
    StencilOutOfDomain(Vec<f64>),

    #[error("adversary energy {measured} exceeds declared bound {declared}")]
    EnergyBoundViolated { measured: f64, declared: f64 },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("matrix {0} is not symmetric positive definite")]
    NotPositiveDefinite(&'static str),

    #[error("unsupported game for the grid oracle: {0}")]
    UnsupportedOracle(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("config parse error: {0}")]
    ConfigParse(#[from] toml::de::Error),

    #[error("config serialization error: {0}")]
    ConfigEmit(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code category used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NoValidLambda(_) => 3,
            Error::InvalidConfig(_) | Error::ConfigParse(_) | Error::ConfigEmit(_) => 2,
            Error::Io(_) => 4,
            _ => 1,
        }
    }
}
