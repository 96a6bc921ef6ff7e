use thiserror::Error;

/// Failures of a run, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] kolmogorov::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 for configuration and hypothesis errors, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        use kolmogorov::Error as E;
        match self {
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Core(e) => match e {
                E::InvalidSpec(_) | E::NotHypoelliptic { .. } | E::InvalidArgument(_) => 2,
                E::SingularGramian { .. }
                | E::OutOfDomain
                | E::DegenerateBox
                | E::NonPositiveValue(_)
                | E::DegenerateFit(_) => 3,
            },
        }
    }
}
