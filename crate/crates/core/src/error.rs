use std::path::PathBuf;

use crate::types::SystemId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("system mismatch: expected {expected}, found {found}")]
    SystemMismatch { expected: SystemId, found: SystemId },

    #[error("unsupported model: {0}")]
    Unsupported(String),

    #[error("alignment undefined: {0}")]
    AlignmentUndefined(String),

    #[error("state error: {0}")]
    State(String),

    #[error(
        "non-finite loss at epoch {epoch}, batch {batch}: elbo={elbo}, consistency={consistency}"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        elbo: f64,
        consistency: f64,
    },

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    /// Short stable identifier, used by the CLI and the C interface.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Format { .. } => "format",
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::SystemMismatch { .. } => "system_mismatch",
            Error::Unsupported(_) => "unsupported",
            Error::AlignmentUndefined(_) => "alignment_undefined",
            Error::State(_) => "state",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::MissingFile(_) => "missing_file",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }
}
