use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss does not depend on any tensor that requires grad")]
    DetachedGraph,

    #[error("backward already ran on this tape; call reset() first")]
    BackwardTwice,

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("degenerate segment: endpoints coincide at ({0}, {1})")]
    ZeroLength(f64, f64),

    #[error("segment center ({x}, {y}) lies outside the {width}x{height} image")]
    CenterOutsideImage { x: f64, y: f64, width: usize, height: usize },

    #[error("segment endpoint ({x}, {y}) lies outside the {width}x{height} image")]
    OutsideImage { x: f64, y: f64, width: usize, height: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported hourglass depth {0} (expected 2, 3 or 4)")]
    UnsupportedDepth(usize),

    #[error("scene generation infeasible: {0}")]
    Infeasible(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("missing annotation for image {0}")]
    MissingAnnotation(PathBuf),

    #[error("malformed {what} in {path}: {detail}")]
    Format { what: &'static str, path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
