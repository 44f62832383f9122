use std::path::PathBuf;

/// Errors raised anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not fit the operator.
    #[error("shape error: {0}")]
    Shape(String),

    /// An argument is outside its admissible range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A loss-network tap name was not recognised or is not served by this network.
    #[error("unknown tap `{0}`")]
    UnknownTap(String),

    /// A network was used for a task it was not built for.
    #[error("task mismatch: {0}")]
    TaskMismatch(String),

    /// A configuration key or value was rejected.
    #[error("config error: {0}")]
    Config(String),

    /// A file or byte stream is malformed.
    #[error("format error: {0}")]
    Format(String),

    /// A weight archive is missing a tensor or holds one of the wrong shape.
    #[error("weight archive error at `{name}`: {reason}")]
    Archive { name: String, reason: String },

    /// A loss or parameter became NaN or infinite.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
