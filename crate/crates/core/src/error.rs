use std::path::PathBuf;

/// Errors raised anywhere in the framework.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("vector norm {norm:e} is below the 1e-12 floor")]
    ZeroNorm { norm: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("non-finite value at {0}")]
    NonFinite(String),

    #[error("invalid utterance id {0:?}")]
    InvalidId(String),
    #[error("duplicate utterance id {0:?}")]
    DuplicateId(String),
    #[error("utterance {0:?} not present")]
    MissingUtterance(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("truncated data: {0}")]
    TruncatedData(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("pairing is not a fixed-point-free involution at index {0}")]
    BadPairing(usize),
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("not a probability distribution (sum = {sum})")]
    NotADistribution { sum: f64 },

    #[error("too few samples: need {needed}, have {have}")]
    TooFewSamples { needed: usize, have: usize },
    #[error("bad cluster target {0}")]
    BadTarget(usize),
    #[error("all values are identical ({0}); mixture fit is degenerate")]
    DegenerateData(f64),
    #[error("mixture components share the mean {0}")]
    DegenerateComponents(f64),
    #[error("misaligned inputs: {0}")]
    Misaligned(String),

    #[error("cache does not match the model it is applied to")]
    StaleCache,
    #[error("utterance has no frames")]
    EmptyUtterance,
    #[error("only one trial class present; need targets and non-targets")]
    OneClassOnly,

    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("utterance too short: {frames} frames, need {needed}")]
    TooShort { frames: usize, needed: usize },
    #[error("corruption fraction {0} outside [0, 1]")]
    BadFraction(f64),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
