use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: failed to read NIfTI: {message}")]
    Nifti { path: PathBuf, message: String },

    #[error("{path}: non-finite intensities ({count} voxels)")]
    NonFinite { path: PathBuf, count: usize },

    #[error("expected {expected}D volume, found {found}D")]
    Dimensionality { expected: usize, found: usize },

    #[error("invalid label codes {0:?}; allowed codes are 0, 1, 2, 4")]
    InvalidLabelCodes(Vec<i64>),

    #[error("invalid class index {0}; expected 0..=3")]
    InvalidClass(i64),

    #[error("probability map voxel {index:?} sums to {sum} (expected 1)")]
    ProbabilityNotNormalized { index: [usize; 3], sum: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate intensity range (min == max == {0})")]
    DegenerateRange(f64),

    #[error("volume not normalized to [0, 1]: {0}")]
    NotNormalized(String),

    #[error("external stage `{command}` failed with {status}:\n{output}")]
    ExternalStage {
        command: String,
        status: String,
        output: String,
    },

    #[error("patch size {patch} exceeds volume shape {shape:?}")]
    PatchTooLarge { patch: usize, shape: [usize; 3] },

    #[error("zero standard deviation in channel {0}")]
    ZeroStd(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss at epoch {epoch}, step {step}: {loss}")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },

    #[error("model produced non-finite output")]
    NonFiniteOutput,

    #[error("unknown resection status `{0}` (expected GTR, STR or NA)")]
    UnknownResection(String),

    #[error("need at least {needed} records, got {got}")]
    TooFewRecords { needed: usize, got: usize },

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("empty mask")]
    EmptyMask,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("missing artifact {path}; run the `{stage}` stage first")]
    MissingArtifact { path: PathBuf, stage: String },

    #[error("{0}")]
    Parse(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
