use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// One error type for the whole crate. The CLI serialises it as `{"error": kind, "message": ...}`.
#[derive(Debug, Error)]
pub enum Error {
    #[error("sequence not found: {0}")]
    MissingSequence(String),
    #[error("cannot decode {path}: {reason}")]
    DecodeError { path: String, reason: String },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("parse error at row {row}, column {col}: {reason}")]
    ParseError { row: usize, col: usize, reason: String },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("input has non-positive pixels")]
    NonPositivePixels,
    #[error("region {0} has no pixels")]
    EmptyRegion(usize),
    #[error("component {0} lost all its support")]
    DegenerateCluster(usize),
    #[error("too few points: need {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("covariance matrix is singular")]
    SingularCovariance,
    #[error("negative divergence input")]
    NegativeInput,
    #[error("kernel matrix is rank deficient, {0} usable dimensions")]
    RankDeficient(usize),
    #[error("no consensus set found")]
    NoConsensus,
    #[error("every eigenvalue of the summed projection is at least one")]
    AllEigenvaluesLarge,
    #[error("projection onto the constraint subspace has rank zero")]
    ProjectedRankZero,
    #[error("corpus too small: {0}")]
    InsufficientCorpus(String),
    #[error("eye centres coincide")]
    CoincidentEyes,
    #[error("only one illumination available")]
    SingleIllumination,
    #[error("normal equations are singular")]
    SingularNormalEquations,
    #[error("neighbourhood graph is disconnected into {count} components")]
    DisconnectedGraph { count: usize, labels: Vec<usize> },
    #[error("component has no new evidence since the last snapshot")]
    NoNewEvidence,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no positive examples")]
    NoPositives,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingSequence(_) => "MissingSequence",
            Error::DecodeError { .. } => "DecodeError",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::ParseError { .. } => "ParseError",
            Error::InvalidParams(_) => "InvalidParams",
            Error::NonPositivePixels => "NonPositivePixels",
            Error::EmptyRegion(_) => "EmptyRegion",
            Error::DegenerateCluster(_) => "DegenerateCluster",
            Error::TooFewPoints { .. } => "TooFewPoints",
            Error::DimensionMismatch(..) => "DimensionMismatch",
            Error::SingularCovariance => "SingularCovariance",
            Error::NegativeInput => "NegativeInput",
            Error::RankDeficient(_) => "RankDeficient",
            Error::NoConsensus => "NoConsensus",
            Error::AllEigenvaluesLarge => "AllEigenvaluesLarge",
            Error::ProjectedRankZero => "ProjectedRankZero",
            Error::InsufficientCorpus(_) => "InsufficientCorpus",
            Error::CoincidentEyes => "CoincidentEyes",
            Error::SingleIllumination => "SingleIllumination",
            Error::SingularNormalEquations => "SingularNormalEquations",
            Error::DisconnectedGraph { .. } => "DisconnectedGraph",
            Error::NoNewEvidence => "NoNewEvidence",
            Error::LengthMismatch(..) => "LengthMismatch",
            Error::NoPositives => "NoPositives",
            Error::Io { .. } => "Io",
            Error::Json(_) => "Json",
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}
