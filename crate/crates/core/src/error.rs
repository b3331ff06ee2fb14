use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("missing tile {slide_id}@({grid_x},{grid_y}) in embedding store")]
    MissingTile {
        slide_id: String,
        grid_x: u32,
        grid_y: u32,
    },

    #[error("specimen {specimen_id} has {count} tiles, above the cap of {cap}; excluded")]
    OverCap {
        specimen_id: String,
        count: usize,
        cap: usize,
    },

    #[error("digest mismatch: artifact {found}, expected {expected}")]
    DigestMismatch { expected: String, found: String },

    #[error("non-finite loss at step {step}: l_con={l_con} l_rep={l_rep}")]
    NonFiniteLoss { step: u64, l_con: f64, l_rep: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Short stable identifier used in machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Format { .. } => "format",
            Error::MissingTile { .. } => "missing_tile",
            Error::OverCap { .. } => "over_cap",
            Error::DigestMismatch { .. } => "digest_mismatch",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }
}
