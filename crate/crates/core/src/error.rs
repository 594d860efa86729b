use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid inverse depth {0}")]
    InvalidDepth(f64),
    #[error("point out of view")]
    OutOfView,
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("frame has no edges")]
    NoEdges,
    #[error("tracking lost: {0}")]
    TrackingLost(String),
    #[error("degenerate system: {0} usable residuals")]
    DegenerateSystem(usize),
    #[error("no edges survive culling")]
    SelectionImpossible,
    #[error("no geometry in view")]
    EmptyFrame,
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("image decode error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
