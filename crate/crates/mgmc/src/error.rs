//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by matrix construction, graph building, model evaluation,
/// training, and data ingestion.
#[derive(Debug, Error)]
pub enum MgmcError {
    /// Shape or dimension mismatch between operands.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A caller violated an operation's contract (non-scalar loss, T=0, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Numeric failure: non-finite values, non-convergence.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// Bad configuration (out-of-range hyperparameter, unknown method name).
    #[error("config error: {0}")]
    Config(String),

    /// Schema problems in dataset sidecar files.
    #[error("schema error: {0}")]
    Schema(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl MgmcError {
    /// Coarse category used for CLI exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            MgmcError::Dimension(_) | MgmcError::Contract(_) => "contract",
            MgmcError::Numeric(_) => "numeric",
            MgmcError::Data(_) => "data",
            MgmcError::Config(_) | MgmcError::Schema(_) => "config",
            MgmcError::Io(_) => "io",
        }
    }

    /// Process exit code for the CLI: 0 is success, each failure category
    /// gets a stable nonzero code.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "data" => 3,
            "numeric" => 4,
            "contract" => 5,
            _ => 6,
        }
    }
}

pub type Result<T> = std::result::Result<T, MgmcError>;
