use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("image size {height}x{width} is not divisible by patch size {patch}")]
    NonDivisible { height: usize, width: usize, patch: usize },
    #[error("patch grid {rows}x{cols} is too small, need at least 2x2")]
    GridTooSmall { rows: usize, cols: usize },
    #[error("bounding box ({x0},{y0})-({x1},{y1}) is invalid or outside the {width}x{height} image")]
    OutOfBounds { x0: usize, y0: usize, x1: usize, y1: usize, width: usize, height: usize },
    #[error("patch index ({row},{col}) outside {rows}x{cols} grid")]
    IndexOutOfRange { row: usize, col: usize, rows: usize, cols: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("score {value} at index {index} is not a finite value in (0, 1)")]
    NonFiniteScore { index: usize, value: f64 },
    #[error("window {h}x{w} does not fit in {rows}x{cols} grid")]
    WindowTooLarge { h: usize, w: usize, rows: usize, cols: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("positive weights for anchor {anchor} sum to {sum}, expected 1")]
    WeightSumViolation { anchor: usize, sum: f64 },
    #[error("invalid positive set for anchor {anchor}: {reason}")]
    InvalidPositives { anchor: usize, reason: String },
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroNorm,
    #[error("batch is empty")]
    BatchTooSmall,
    #[error("side ratio {0} outside the allowed range")]
    InvalidSideRatio(f64),
    #[error("joint distribution has a zero-probability {axis} symbol at index {index}")]
    DegenerateMarginal { axis: &'static str, index: usize },
    #[error("invalid joint distribution: {0}")]
    InvalidJoint(String),
    #[error("alphabet {alphabet} with batch size {n} is too large for exact enumeration; supply a Monte-Carlo seed and sample count")]
    AlphabetTooLarge { alphabet: usize, n: usize },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("bad image dimensions for {image}: {height}x{width} with patch size {patch}")]
    BadDimensions { image: String, height: usize, width: usize, patch: usize },
    #[error("schema error at line {line}: {message}")]
    SchemaError { line: usize, message: String },
    #[error("unsupported format version {found} (supported: {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("invalid image file: {0}")]
    ImageFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Errors caused by bad inputs or flags rather than by a failure while working.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::Csv(_))
    }
}
