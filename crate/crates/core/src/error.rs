use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A voxel cannot be normalized or fitted (e.g. non-positive b=0 amplitude).
    #[error("degenerate voxel: {0}")]
    DegenerateVoxel(String),

    /// Training produced a non-finite loss; the run is aborted, never papered over.
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    /// A numerical routine failed to produce a finite result.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// An on-disk artifact is malformed or inconsistent with expectations.
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    /// A file or directory cannot be opened or created.
    #[error("cannot open {path}: {source}")]
    Open {
        path: String,
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn open(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Open {
            path: path.into(),
            source,
        }
    }
}
