use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("image too small: {width}x{height}, need at least {min}x{min}")]
    ImageTooSmall { width: u32, height: u32, min: u32 },
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("invalid image buffer: {0}")]
    InvalidImage(String),
    #[error("singular transform (det = {0:e})")]
    SingularTransform(f64),
    #[error("no frames found in {0}")]
    NoFramesFound(PathBuf),
    #[error("inconsistent frame dimensions: {path} is {got:?}, expected {expected:?}")]
    InconsistentDimensions {
        path: PathBuf,
        got: (u32, u32),
        expected: (u32, u32),
    },
    #[error("insufficient matches: {got} < {needed}")]
    InsufficientMatches { got: usize, needed: usize },
    #[error("no consensus: best inlier set {inliers} < {min_inliers}")]
    NoConsensus { inliers: usize, min_inliers: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("stitch failed: {0}")]
    StitchFailed(String),
    #[error("no valid tiles")]
    NoValidTiles,
    #[error("corrupt pyramid: {0}")]
    CorruptPyramid(String),
    #[error("infeasible sweep spec: {0}")]
    SpecInfeasible(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec error on {path}: {source}")]
    Codec {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("JSON error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Innermost error beneath any stage context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}

/// Attaches a pipeline stage name to errors.
pub trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
