use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the toolkit can report. Variant names double as the error
/// class printed by the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed container: {0}")]
    MalformedContainer(String),
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("audio contains no sample frames")]
    EmptyAudio,
    #[error("clip too short: {0} samples (need at least 2)")]
    ClipTooShort(usize),
    #[error("mel filter {index} spans no FFT bins")]
    DegenerateFilter { index: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("bad filename: {0}")]
    BadFilename(String),
    #[error("unknown emotion code {code:?} in {name}")]
    UnknownEmotionCode { code: String, name: String },
    #[error("unknown emotion label {0:?}")]
    UnknownLabel(String),
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch of {0} is too small for batch statistics")]
    DegenerateBatch(usize),
    #[error("target row {row} is not a probability distribution (sum {sum})")]
    InvalidTarget { row: usize, sum: f64 },
    #[error("only one class present in training data")]
    SingleClass,
    #[error("non-finite feature at row {row}, column {col}")]
    NonFiniteFeature { row: usize, col: usize },
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("tensor {name}: expected dims {expected:?}, found {found:?}")]
    DimMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("split {0} has no examples")]
    EmptySplit(String),
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    /// Name of the error class, as printed on stderr by the CLI.
    pub fn class_name(&self) -> &'static str {
        match self {
            Error::MalformedContainer(_) => "MalformedContainer",
            Error::UnsupportedEncoding(_) => "UnsupportedEncoding",
            Error::EmptyAudio => "EmptyAudio",
            Error::ClipTooShort(_) => "ClipTooShort",
            Error::DegenerateFilter { .. } => "DegenerateFilter",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::BadFilename(_) => "BadFilename",
            Error::UnknownEmotionCode { .. } => "UnknownEmotionCode",
            Error::UnknownLabel(_) => "UnknownLabel",
            Error::EmptyManifest => "EmptyManifest",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::DegenerateBatch(_) => "DegenerateBatch",
            Error::InvalidTarget { .. } => "InvalidTarget",
            Error::SingleClass => "SingleClass",
            Error::NonFiniteFeature { .. } => "NonFiniteFeature",
            Error::MissingTensor(_) => "MissingTensor",
            Error::DimMismatch { .. } => "DimMismatch",
            Error::NonFiniteGradient(_) => "NonFiniteGradient",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::EmptySplit(_) => "EmptySplit",
            Error::EmptyMatrix => "EmptyMatrix",
            Error::Io { .. } => "IoError",
            Error::Csv(_) => "IoError",
        }
    }
}
