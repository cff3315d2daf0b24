use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("index {index} exceeds the configured maximum {max}")]
    IndexOverflow { index: usize, max: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("disk at ({cx}, {cy}) with radius {r} leaves the window [-{half_width}, {half_width}]^2")]
    OutOfWindow {
        cx: f64,
        cy: f64,
        r: f64,
        half_width: f64,
    },

    #[error("grid window too small: {0}")]
    WindowTooSmall(String),

    #[error("zero-norm input: {0}")]
    ZeroNorm(String),

    #[error("truncation error: {0}")]
    Truncation(String),

    #[error("degenerate window: B = {b:e} vanishes, theta bound unavailable")]
    DegenerateWindow { b: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("rank {rank} too large for operator-norm kernel mode (limit {limit})")]
    RankTooLarge { rank: usize, limit: usize },

    #[error("operator is not flagged positive")]
    NotPositive,

    #[error("memory budget exceeded: {needed} entries requested, budget {budget}")]
    Budget { needed: usize, budget: usize },

    #[error("solver did not converge after {iterations} iterations (relative gap {gap:e}, feasibility {feasibility:e})")]
    NonConvergence {
        iterations: usize,
        gap: f64,
        feasibility: f64,
    },

    #[error("infeasible constraints: relative residual {residual:e} on the observed nodes")]
    Infeasible { residual: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Short machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::IndexOverflow { .. } => "index_overflow",
            Error::Domain(_) => "domain",
            Error::OutOfWindow { .. } => "out_of_window",
            Error::WindowTooSmall(_) => "window_too_small",
            Error::ZeroNorm(_) => "zero_norm",
            Error::Truncation(_) => "truncation",
            Error::DegenerateWindow { .. } => "degenerate_window",
            Error::Precondition(_) => "precondition",
            Error::RankTooLarge { .. } => "rank_too_large",
            Error::NotPositive => "not_positive",
            Error::Budget { .. } => "budget",
            Error::NonConvergence { .. } => "non_convergence",
            Error::Infeasible { .. } => "infeasible",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Io(_) => "io",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
