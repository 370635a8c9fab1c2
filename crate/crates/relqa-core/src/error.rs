use thiserror::Error;

/// Error type shared across the crate.
///
/// The CLI maps `Usage` to exit code 2 and everything else to exit code 1,
/// so new variants should pick the right side of that line.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("vocabulary error: unknown token {0:?}")]
    UnknownToken(String),
    #[error("generator error: {0}")]
    Generator(String),
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by how the caller invoked us rather than by
    /// runtime state (bad flags, out-of-range arguments, missing files).
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Usage(_))
    }
}
