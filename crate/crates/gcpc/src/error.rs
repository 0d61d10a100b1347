use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch between tensors or model components.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A caller violated an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),
    /// Invalid or unknown configuration.
    #[error("config error: {0}")]
    Config(String),
    /// Malformed file contents (bad magic, version, truncation).
    #[error("format error: {0}")]
    Format(String),
    /// Non-finite values or other numeric failures.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 3 config, 4 data/format, 5 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 3,
            Error::Format(_) | Error::Io(_) | Error::Dimension(_) => 4,
            Error::Contract(_) | Error::Numeric(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
