use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical underflow: {0}")]
    NumericalUnderflow(String),

    #[error("acceptance budget exceeded: {accepted} of {requested} draws accepted after {proposals} proposals (acceptance rate {rate:.3e})")]
    AcceptanceBudgetExceeded {
        requested: usize,
        accepted: usize,
        proposals: usize,
        rate: f64,
    },

    #[error("partition budget exceeded: more than {cap} cells required")]
    PartitionBudget { cap: usize },

    #[error("degenerate marginals: {0}")]
    DegenerateMarginal(String),

    #[error("solver did not converge: {0}")]
    NotConverged(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the CLI for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_)
            | Error::InvalidInput(_)
            | Error::Config(_)
            | Error::Json(_)
            | Error::DegenerateMarginal(_) => 2,
            Error::AcceptanceBudgetExceeded { .. } => 4,
            Error::NumericalUnderflow(_)
            | Error::PartitionBudget { .. }
            | Error::NotConverged(_)
            | Error::Io(_)
            | Error::Csv(_) => 3,
        }
    }

    /// Short machine-readable tag for structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::InvalidInput(_) => "invalid-input",
            Error::NumericalUnderflow(_) => "numerical-underflow",
            Error::AcceptanceBudgetExceeded { .. } => "acceptance-budget-exceeded",
            Error::PartitionBudget { .. } => "partition-budget",
            Error::DegenerateMarginal(_) => "degenerate-marginal",
            Error::NotConverged(_) => "not-converged",
            Error::Config(_) => "invalid-config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub(crate) fn invalid_arg(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
