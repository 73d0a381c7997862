use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Operator or workload exceeds a configured size cap.
    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error("power iteration did not converge after {iterations} iterations on a {rows}x{cols} matrix")]
    NotConverged {
        iterations: usize,
        rows: usize,
        cols: usize,
    },

    #[error("config parse error: {0}")]
    Parse(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("unknown architecture '{name}'; available: {available}")]
    UnknownArchitecture { name: String, available: String },

    /// Rejection sampling ran out of attempts.
    #[error("rejection sampling exhausted after {attempts} attempts: {what}")]
    RejectionExhausted { attempts: usize, what: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
