//! Error type shared across the crate, with process exit codes for the CLI.

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum GrnError {
    /// Invalid configuration value; names the offending field.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed on-disk data (dataset, checkpoint, tensor dump).
    #[error("data format error at byte {offset}: {message}")]
    DataFormat { offset: u64, message: String },

    /// Operand shapes incompatible with an operation.
    #[error("shape mismatch in {op}: {details}")]
    Shape { op: &'static str, details: String },

    /// NaN or Inf surfaced during numeric work; training aborts on this.
    #[error("numerical abort: {0}")]
    NonFinite(String),

    /// Reference-set leakage guard tripped. Always a hard error.
    #[error("leakage violation: {0}")]
    Leakage(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Precondition violation that is not a config-file problem.
    #[error("{0}")]
    Invalid(String),
}

impl GrnError {
    /// Exit code contract: 0 success, 2 config, 3 data format, 4 numerical, 5 leakage.
    pub fn exit_code(&self) -> i32 {
        match self {
            GrnError::Config(_) | GrnError::Shape { .. } | GrnError::Invalid(_) => 2,
            GrnError::DataFormat { .. } | GrnError::Io(_) => 3,
            GrnError::NonFinite(_) => 4,
            GrnError::Leakage(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, GrnError>;
