use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point has non-positive depth {0} in camera frame")]
    NonPositiveDepth(f64),
    #[error("ground homography is singular (|det| = {0:e})")]
    SingularHomography(f64),
    #[error("invalid calibration for view {view}: {reason}")]
    InvalidCalibration { view: usize, reason: String },
    #[error("anchor ground point does not project inside view {0}")]
    AnchorNotVisible(usize),
    #[error("degenerate camera rig: {0}")]
    DegenerateRig(String),
    #[error("rect {rect:?} is outside a {height}x{width} image")]
    RectOutOfBounds { rect: [usize; 4], height: usize, width: usize },
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("bad patch size {0}x{1}: both sides must be at least 2")]
    BadSize(usize, usize),
    #[error("patch step needs at least one placement")]
    EmptyPlacementList,
    #[error("optimization diverged: {0}")]
    Diverged(String),
    #[error("non-finite input gradient in view {0}")]
    NonFiniteGradient(usize),
    #[error("wrong victim: {0}")]
    WrongVictim(String),
    #[error("no results to report in {0}")]
    EmptyResults(String),
    #[error("io error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
