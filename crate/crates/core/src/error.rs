use std::path::PathBuf;

use thiserror::Error;

use crate::nn::TrainingHistory;

pub type Result<T> = std::result::Result<T, IvimError>;

#[derive(Debug, Error)]
pub enum IvimError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),

    #[error("schedule mismatch: {0}")]
    ScheduleMismatch(String),

    #[error("underdetermined fit: {0}")]
    Underdetermined(String),

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    /// Training produced a non-finite loss. The history up to the failing
    /// epoch is kept for inspection.
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged {
        epoch: usize,
        history: Box<TrainingHistory>,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("missing labels: {0}")]
    MissingLabels(String),

    #[error("undefined normalization: mean absolute reference is zero")]
    UndefinedNormalization,

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("join error: {0}")]
    Join(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl IvimError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IvimError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command line tool, one per error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            IvimError::Config(_) | IvimError::InvalidArgument(_) => 2,
            IvimError::Io { .. } => 3,
            IvimError::Format(_) | IvimError::MissingLabels(_) => 4,
            IvimError::Shape(_) | IvimError::ScheduleMismatch(_) => 5,
            IvimError::Diverged { .. } | IvimError::NumericFailure(_) => 6,
            IvimError::Join(_) => 7,
            IvimError::DegenerateSignal(_)
            | IvimError::Underdetermined(_)
            | IvimError::UndefinedNormalization
            | IvimError::UndefinedCorrelation(_) => 8,
        }
    }
}
