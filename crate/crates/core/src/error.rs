use thiserror::Error;

/// Error type shared across the whole engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape disagreement between tensors or between a schema and data.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed manifest, CSV, or checkpoint content.
    #[error("format error: {0}")]
    Format(String),

    /// An index referring outside its container.
    #[error("index error: {0}")]
    Index(String),

    /// A non-finite value produced where finite arithmetic was required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A request exceeding a hard size guard.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// A violated call contract between modules.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Same error with a location prefix on the message. Io errors
    /// pass through untouched: their paths already locate them.
    pub fn context(self, ctx: &str) -> Error {
        match self {
            Error::Dimension(m) => Error::Dimension(format!("{ctx}: {m}")),
            Error::Domain(m) => Error::Domain(format!("{ctx}: {m}")),
            Error::Format(m) => Error::Format(format!("{ctx}: {m}")),
            Error::Index(m) => Error::Index(format!("{ctx}: {m}")),
            Error::Numeric(m) => Error::Numeric(format!("{ctx}: {m}")),
            Error::Capacity(m) => Error::Capacity(format!("{ctx}: {m}")),
            Error::Contract(m) => Error::Contract(format!("{ctx}: {m}")),
            Error::Io(e) => Error::Io(e),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
