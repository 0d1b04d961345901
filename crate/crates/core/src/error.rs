use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PfrpError> = std::result::Result<T, E>;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad arguments, bad configuration, contract violations by the caller.
    Usage,
    /// Input data or files are missing, malformed or corrupt.
    Data,
    /// A computation produced a non-finite value.
    Numeric,
}

#[derive(Debug, Error)]
pub enum PfrpError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Data(String),

    #[error("non-finite value at row {row} of {path}")]
    NonFinite { path: PathBuf, row: usize },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported format version: {0}")]
    Version(String),

    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("stale cache: {0}")]
    StaleCache(&'static str),

    #[error("non-finite {0}")]
    Numeric(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<PfrpError>,
    },
}

impl PfrpError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PfrpError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        PfrpError::InvalidArgument(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        PfrpError::Data(msg.into())
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            PfrpError::Io { .. }
            | PfrpError::Data(_)
            | PfrpError::NonFinite { .. }
            | PfrpError::Version(_)
            | PfrpError::Checksum { .. } => ErrorClass::Data,
            PfrpError::Numeric(_) => ErrorClass::Numeric,
            PfrpError::Shape { .. } | PfrpError::InvalidArgument(_) | PfrpError::StaleCache(_) => {
                ErrorClass::Usage
            }
            PfrpError::Stage { source, .. } => source.class(),
        }
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(PfrpError::Shape {
            context,
            expected,
            actual,
        })
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| PfrpError::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
