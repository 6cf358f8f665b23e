use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes or widths that do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A value left the domain of an operation (log of a non-positive
    /// number, overflow to infinity, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A caller broke a precondition of an operation.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// The expert could not complete a lap, so the demonstration set would be
    /// meaningless.
    #[error("expert failure on track `{track}`: {reason}")]
    Expert { track: String, reason: String },

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
