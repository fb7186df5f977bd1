use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used by the command line front end to pick an exit
/// status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Input,
    Numerical,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("covariates are rank deficient: rank {rank}, need {expected}")]
    RankDeficient { rank: usize, expected: usize },

    #[error("constraint {constraint} is infeasible: zero lies outside the convex hull of its values")]
    ConstraintInfeasible { constraint: usize },

    #[error("inner dual solve did not converge after {iterations} iterations (residual {residual:e})")]
    InnerNonConvergence { iterations: usize, residual: f64 },

    #[error("outer optimization did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    OuterNonConvergence {
        iterations: usize,
        grad_norm: f64,
        best: Vec<f64>,
    },

    #[error("identifiability: {0}")]
    Identifiability(String),

    #[error("logistic fit shows separation: fitted probabilities collapse to 0 or 1")]
    Separation,

    #[error("singular block {block}")]
    SingularBlock { block: &'static str },

    #[error("{what} is ill-conditioned (condition number {condition:e})")]
    IllConditioned { what: &'static str, condition: f64 },

    #[error("negative variance {value:e} at index {index}")]
    NegativeVariance { index: usize, value: f64 },

    #[error("iterated refit did not settle after {iterations} rounds; step trace {trace:?}")]
    RefitNonConvergence { iterations: usize, trace: Vec<f64> },

    #[error("sampling budget of {budget} draws exhausted before quotas were met")]
    SamplingBudget { budget: u64 },

    #[error("protocol: {0}")]
    Protocol(String),

    #[error("schema: {0}")]
    Schema(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn category(&self) -> Category {
        match self {
            Error::InvalidInput(_)
            | Error::RankDeficient { .. }
            | Error::Protocol(_)
            | Error::Schema(_)
            | Error::Config(_) => Category::Input,
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => Category::Io,
            _ => Category::Numerical,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
