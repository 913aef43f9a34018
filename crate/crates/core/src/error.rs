use thiserror::Error;

/// Every failure the library reports.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("malformed view: {0}")]
    MalformedView(String),
    #[error("undefined fraction: {0}")]
    UndefinedFraction(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("validity error: {0}")]
    Validity(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("unsupported strategy: {0}")]
    UnsupportedStrategy(String),
    #[error("precision error: {0}")]
    Precision(String),
    #[error("sequence too short: {0}")]
    SequenceTooShort(String),
    #[error("singular parameter: {0}")]
    Singular(String),
    #[error("did not converge: {0}")]
    NonConvergence(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}
