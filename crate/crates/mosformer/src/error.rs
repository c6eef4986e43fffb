use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two tensor shapes that should have agreed did not.
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A configuration value is invalid (bad dimensions, zero step size, ...).
    #[error("invalid config: {0}")]
    Config(String),
    /// A runtime input is invalid (label out of range, wrong frame size, ...).
    #[error("invalid input: {0}")]
    Input(String),
    /// An API was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),
    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// I/O failure, always carrying the offending path.
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// A file exists but its contents are not what the format requires.
    #[error("malformed file {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },
    /// A versioned container with a version this build does not support.
    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad configuration or bad user input, as
    /// opposed to runtime failures. The CLI maps these to exit code 2.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Input(_) | Error::Usage(_) | Error::ShapeMismatch { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
