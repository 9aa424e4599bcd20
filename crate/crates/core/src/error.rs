use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("negative or non-finite entry {value} at index {index}")]
    NegativeEntry { index: usize, value: f64 },

    #[error("probability vector sums to zero")]
    ZeroVector,

    #[error("invalid probability vector: {0}")]
    InvalidPdf(String),

    #[error("invalid catalogue: {0}")]
    Catalogue(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("malformed annotation row {line}: {message}")]
    MalformedRow { line: usize, message: String },

    #[error("row {line} ({intersection_id}): distance-to-intersection out of range: {message}")]
    D2iOutOfRange {
        line: usize,
        intersection_id: String,
        message: String,
    },

    #[error("topology class {class} has {available} intersections, need at least {required}")]
    TooFewIntersections {
        class: u8,
        available: usize,
        required: usize,
    },

    #[error("no flow sequence of topology class {class} available in the {partition} partition")]
    NoEligibleSequence { class: u8, partition: String },

    #[error("frame size mismatch: {a:?} vs {b:?}")]
    SizeMismatch { a: (usize, usize), b: (usize, usize) },

    #[error("need at least 2 frames, got {0}")]
    TooFewFrames(usize),

    #[error("invalid embedding sequence: {0}")]
    InvalidSequence(String),

    #[error("backbone unavailable: {0}")]
    BackboneUnavailable(String),

    #[error("wrong input size: expected {expected:?}, got {actual:?}")]
    WrongInputSize {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("backbone lacks the expected pooling structure: {0}")]
    BackboneStructure(String),

    #[error("class {0} has no training samples")]
    EmptyClass(usize),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("fold {fold}: intersection {intersection_id} appears in both {a} and {b}")]
    Leakage {
        fold: usize,
        intersection_id: String,
        a: &'static str,
        b: &'static str,
    },

    #[error("label {label} outside 1..={max}")]
    LabelOutOfRange { label: usize, max: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("missing cache entry {0} and recompute is disabled")]
    MissingCache(PathBuf),

    #[error(transparent)]
    Image(#[from] image::ImageError),

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

    /// Short machine-readable tag for the error category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::NegativeEntry { .. } => "negative_entry",
            Error::ZeroVector => "zero_vector",
            Error::InvalidPdf(_) => "invalid_pdf",
            Error::Catalogue(_) => "catalogue",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::MissingFile(_) => "missing_file",
            Error::MalformedRow { .. } => "malformed_row",
            Error::D2iOutOfRange { .. } => "d2i_out_of_range",
            Error::TooFewIntersections { .. } => "too_few_intersections",
            Error::NoEligibleSequence { .. } => "no_eligible_sequence",
            Error::SizeMismatch { .. } => "size_mismatch",
            Error::TooFewFrames(_) => "too_few_frames",
            Error::InvalidSequence(_) => "invalid_sequence",
            Error::BackboneUnavailable(_) => "backbone_unavailable",
            Error::WrongInputSize { .. } => "wrong_input_size",
            Error::BackboneStructure(_) => "backbone_structure",
            Error::EmptyClass(_) => "empty_class",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Leakage { .. } => "leakage",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::Empty(_) => "empty",
            Error::Format(_) => "format",
            Error::MissingCache(_) => "missing_cache",
            Error::Image(_) => "image",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
