use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can report.
///
/// Variants map onto the CLI exit codes through [`Error::is_invalid_input`]:
/// anything caused by malformed or inconsistent inputs exits with 2,
/// everything else with 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported {format} version {version}")]
    VersionUnsupported { format: &'static str, version: u16 },

    #[error("truncated {0} file")]
    TruncatedFile(&'static str),

    #[error("corrupt payload: {0}")]
    CorruptPayload(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("vector dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("run {index} overlaps or is out of order with its predecessor")]
    OverlappingRuns { index: usize },

    #[error("run {index} exceeds the {pixels}-pixel mask")]
    RunOutOfBounds { index: usize, pixels: usize },

    #[error("mask covers no patch of the feature map")]
    EmptyCoverage,

    #[error("pooled feature has zero norm")]
    DegenerateFeature,

    #[error("label id {0} is not in the vocabulary")]
    UnknownLabel(usize),

    #[error("database is empty")]
    EmptyDatabase,

    #[error("search index has not been built")]
    IndexNotBuilt,

    #[error("missing text embeddings: {0}")]
    MissingEmbeddings(String),

    #[error("no neighbors to score")]
    NoNeighbors,

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("proposals and score vectors are misaligned: {proposals} vs {scores}")]
    MisalignedInputs { proposals: usize, scores: usize },

    #[error("masks do not share one image size")]
    MixedDimensions,

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn is_invalid_input(&self) -> bool {
        !matches!(self, Error::Internal(_))
    }
}
