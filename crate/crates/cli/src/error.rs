use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or flag combinations. Exit code 2.
    #[error("usage: {0}")]
    Usage(String),

    /// Anything that went wrong while running. Exit code 1.
    #[error("{0}")]
    Run(String),

    #[error(transparent)]
    Core(#[from] mdp_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

/// Prefixes a worker failure with its rank.
pub(crate) fn on_rank(rank: usize, e: impl std::fmt::Display) -> CliError {
    CliError::Run(format!("rank {rank}: {e}"))
}
