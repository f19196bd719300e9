use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}:{line}:{column}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),

    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },

    #[error("ingredient check failed: {0}")]
    Verification(String),

    #[error(transparent)]
    Core(#[from] retc_core::Error),
}

impl CliError {
    /// Process exit status: 2 for bad input, 3 for an infeasible OCP or
    /// transmission, 4 for numerical failures, 1 for I/O.
    pub fn exit_code(&self) -> u8 {
        use retc_core::Error as E;
        match self {
            CliError::Parse { .. } | CliError::Validation(_) => 2,
            CliError::Io { .. } => 1,
            CliError::Verification(_) => 4,
            CliError::Core(e) => match e {
                E::Dimension(_) | E::InvalidModel(_) | E::InvalidParameter(_) => 2,
                E::OcpInfeasible { .. } | E::InfeasibleTransmission { .. } => 3,
                _ => 4,
            },
        }
    }
}
