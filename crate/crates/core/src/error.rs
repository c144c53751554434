use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand extents are incompatible.
    #[error("dimension error: {0}")]
    Shape(String),

    /// An argument lies outside its mathematical domain (percentile, label, ...).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("autograd error: {0}")]
    Autograd(String),

    #[error("config error: {0}")]
    Config(String),

    /// A forward pass or loss produced NaN/Inf.
    #[error("numeric failure: {0}")]
    NonFinite(String),

    /// The batch cannot form a single valid triplet.
    #[error("invalid batch: {0}")]
    Batch(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) => 2,
            Error::Io(_) | Error::Format(_) => 3,
            _ => 1,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Config(e.to_string())
    }
}
