use std::path::PathBuf;

use crate::loss::LossBreakdown;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not conform for the requested operation.
    #[error("{op}: shape mismatch {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// The caller violated an operation's precondition.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite loss at step {step}: {breakdown}")]
    NonFiniteLoss {
        step: usize,
        breakdown: Box<LossBreakdown>,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: malformed file: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    #[error("{}: unsupported format version {found} (this build reads version {expected})", path.display())]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, shapes: &[&[usize]]) -> Self {
        Error::Shape {
            op,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (flags, files, shapes) as
    /// opposed to numerical failure during a run.
    pub fn is_configuration(&self) -> bool {
        !matches!(self, Error::NonFiniteLoss { .. })
    }
}
