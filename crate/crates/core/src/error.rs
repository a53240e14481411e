use thiserror::Error;

pub type Result<T, E = IrcError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum IrcError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parameter {name} = {value} outside [{lower}, {upper}]")]
    OutOfBounds {
        name: String,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("operation not available for task {0}")]
    WrongTask(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("likelihood of trajectory {trajectory} is not finite: {detail}")]
    Likelihood { trajectory: usize, detail: String },

    #[error("all {restarts} restarts failed; last error: {last}")]
    AllRestartsFailed { restarts: usize, last: String },

    #[error("malformed {format} data: {detail}")]
    Format { format: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl IrcError {
    pub(crate) fn format(format: &'static str, detail: impl Into<String>) -> Self {
        IrcError::Format {
            format,
            detail: detail.into(),
        }
    }
}
