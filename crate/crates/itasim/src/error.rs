use thiserror::Error;

/// Unified error type for the simulator.
///
/// `Config` covers configuration-time derivation failures (scale ratios or
/// integer constants that do not fit their declared widths), `Usage` covers
/// caller mistakes (shape mismatches, out-of-range arguments), and
/// `KernelOverflow` covers runtime intermediates that exceed the declared
/// datapath width for a specific input.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration: {0}")]
    Config(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("kernel overflow in {op} for input {input}")]
    KernelOverflow { op: &'static str, input: i64 },
    #[error("package: {0}")]
    Package(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
    pub fn package(msg: impl Into<String>) -> Self {
        Error::Package(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
