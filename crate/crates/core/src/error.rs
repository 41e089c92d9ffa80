use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("{path}: bad magic bytes, not a UPMF tensor file")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported tensor file version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: String, found: String },
    #[error("{path}: truncated file, expected {expected} bytes, found {found}")]
    TruncatedFile {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: non-finite value at element {index}")]
    NonFiniteValue { path: PathBuf, index: usize },

    #[error("feature map height {height} is not divisible by partition scale {k}")]
    IndivisibleHeight { height: usize, k: usize },
    #[error("batch normalization needs at least 2 samples in train mode, got {0}")]
    NormDegenerate(usize),
    #[error("backward pass requested without a forward cache")]
    MissingCache,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("tracklet has no frames")]
    EmptyTracklet,
    #[error("unknown tracklet (camera {camera}, tracklet {tracklet})")]
    UnknownTracklet { camera: u32, tracklet: u32 },
    #[error("batch item source (camera {camera}, tracklet {tracklet}) is not in the anchor bank")]
    UnknownSource { camera: u32, tracklet: u32 },
    #[error("dataset too small: {0}")]
    DatasetTooSmall(String),
    #[error("ground-truth person ids are required for evaluation: {0}")]
    MissingGroundTruth(String),
    #[error("part count mismatch: local has {local}, global has {global}")]
    PartCountMismatch { local: usize, global: usize },
    #[error("need at least 2 identities seen by 2 or more cameras, found {0}")]
    InsufficientCrossCameraIdentities(usize),
}

impl Error {
    /// Errors caused by bad user input (configs, manifests, specs) rather than
    /// failures while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Validation(_)
                | Error::InvalidConfig(_)
                | Error::InvalidSpec(_)
                | Error::MissingFile(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
