use thiserror::Error;

/// Errors raised by the toolkit.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid operator: {0}")]
    InvalidSpec(String),

    #[error("operator is not hypoelliptic: controllability rank stalls at {rank} < {n}")]
    NotHypoelliptic { rank: usize, n: usize },

    #[error("gramian is numerically singular at t = {t:e} (smallest eigenvalue {min_eig:e}, floor {floor:e})")]
    SingularGramian { t: f64, min_eig: f64, floor: f64 },

    #[error("evaluation point leaves the domain box")]
    OutOfDomain,

    #[error("domain box is too small for third differences at the minimum scale")]
    DegenerateBox,

    #[error("non-positive value {0:e} cannot be fitted on a log scale")]
    NonPositiveValue(f64),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
