use epimatch::Error;

/// Failures of a CLI run, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, configuration or input files: exit code 2.
    #[error("{0}")]
    Usage(String),

    /// The computation itself failed: exit code 3.
    #[error("{0}")]
    Failure(String),

    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failure(_) => 3,
            CliError::Core(e) => match e {
                Error::InvalidArgument(_)
                | Error::Format { .. }
                | Error::Io { .. }
                | Error::Image { .. }
                | Error::Json(_)
                | Error::InsufficientData { .. }
                | Error::DegenerateMotion { .. } => 2,
                Error::BehindCamera { .. }
                | Error::DegenerateLine
                | Error::DegeneratePatch(_)
                | Error::EstimationFailed(_)
                | Error::UndefinedMetric(_)
                | Error::TrainingStalled { .. } => 3,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
