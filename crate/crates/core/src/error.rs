use thiserror::Error;

/// Errors raised by the numeric core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("schedule misuse: {0}")]
    ScheduleMisuse(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
