use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the library. Each variant maps to one CLI exit class.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or out-of-range input data.
    #[error("input error: {0}")]
    Input(String),

    /// A JSON document or JSON-lines record failed to parse.
    #[error("{path}:{line}: {message}")]
    Format {
        path: String,
        line: usize,
        message: String,
    },

    /// Reference to a node, class or instance that does not exist.
    #[error("lookup error: {0}")]
    Lookup(String),

    /// Caller broke a precondition (mismatched dimensions, self-pairs, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Configuration values that contradict each other.
    #[error("config error: {0}")]
    Config(String),

    /// Non-finite value produced during a numeric computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn lookup(msg: impl Into<String>) -> Self {
        Error::Lookup(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class: 2 usage/config, 3 input, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) => 2,
            Error::Input(_) | Error::Format { .. } | Error::Lookup(_) | Error::Io { .. } => 3,
            Error::Numeric(_) => 4,
        }
    }
}
