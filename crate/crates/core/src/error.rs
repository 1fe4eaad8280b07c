use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point projects with non-positive depth {0:e}")]
    DegeneratePoint(f64),
    #[error("box extents must be positive, got {0:?}")]
    InvalidExtent([f64; 3]),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("ill-conditioned eigen-gap {gap:e}")]
    IllConditioned { gap: f64 },
    #[error("no consensus: best iteration had {best} inliers")]
    NoConsensus { best: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("nothing to evaluate")]
    EmptyEvaluation,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient in `{0}`")]
    NonFiniteGradient(String),
    #[error("set of {0} elements is too small")]
    DegenerateSet(usize),
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error("channel {0} has no selected peak")]
    MissingChannel(usize),
    #[error("pose estimation failed: {0}")]
    EstimationFailed(String),
    #[error("view-sphere sampling exhausted after {0} rejections")]
    RejectionExhausted(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
