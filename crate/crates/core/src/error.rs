use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),

    #[error("failed to parse network graph: {0}")]
    GraphParse(String),

    #[error("stage tap `{0}` is not an output of the network graph")]
    UnknownStageTap(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("failed to decode image: {0}")]
    Decode(String),

    #[error("image is {width}x{height}, both sides must be at least {min} pixels")]
    ImageTooSmall { width: u32, height: u32, min: u32 },

    #[error("inference failed: {0}")]
    Inference(String),

    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empirical distribution is empty")]
    EmptyDistribution,

    #[error("transport weights do not sum to one: {0}")]
    WeightMismatch(String),

    #[error("no stage has a channel with non-zero causal weight")]
    EmptyCausalSet,

    #[error("calibration set is empty")]
    EmptyCalibrationSet,

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("reference is {ref_h}x{ref_w} but distorted image is {dist_h}x{dist_w}")]
    DimMismatchBetweenPair {
        ref_h: usize,
        ref_w: usize,
        dist_h: usize,
        dist_w: usize,
    },

    #[error("unsupported dictionary schema (found {found}, expected {expected})")]
    SchemaVersionMismatch { found: String, expected: u32 },

    #[error("dictionary was built for backbone `{found}`, expected `{expected}`")]
    BackboneMismatch { expected: String, found: String },

    #[error("malformed dictionary file: {0}")]
    DictionaryFormat(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("manifest has no records")]
    EmptyManifest,

    #[error("reference image missing: {}", .0.display())]
    MissingReferenceImage(PathBuf),

    #[error("MOS range is degenerate (min == max == {0})")]
    DegenerateRange(f64),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("input has zero variance")]
    ZeroVariance,

    #[error("logistic fit diverged")]
    FitDiverged,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// True for errors caused by the caller's inputs (missing files, bad
    /// formats, mismatched images) rather than by a failing pipeline stage.
    pub fn is_input_error(&self) -> bool {
        if let Error::Io(e) = self {
            return e.kind() == std::io::ErrorKind::NotFound;
        }
        matches!(
            self,
            Error::FileNotFound(_)
                | Error::GraphParse(_)
                | Error::UnknownStageTap(_)
                | Error::InvalidConfig(_)
                | Error::Decode(_)
                | Error::ImageTooSmall { .. }
                | Error::DimMismatchBetweenPair { .. }
                | Error::SchemaVersionMismatch { .. }
                | Error::BackboneMismatch { .. }
                | Error::DictionaryFormat(_)
                | Error::Parse { .. }
                | Error::EmptyManifest
                | Error::MissingReferenceImage(_)
                | Error::DegenerateRange(_)
                | Error::Json(_)
        )
    }
}
