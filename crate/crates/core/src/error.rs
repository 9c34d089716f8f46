use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// Orthonormalization lost rank; the caller should resample.
    #[error("degenerate basis after {attempts} attempts")]
    DegenerateBasis { attempts: usize },

    #[error("point coincides with the projection center (index {index})")]
    ZeroNorm { index: usize },

    #[error("non-finite input at coordinate {index}")]
    NonFinite { index: usize },

    #[error("invalid target: {0}")]
    InvalidTarget(String),

    #[error("class {class} out of range for {class_count} classes")]
    ClassOutOfRange { class: usize, class_count: usize },

    #[error("loss became non-finite at step {step}")]
    Divergence { step: usize },

    #[error("ensemble has no members")]
    EmptyEnsemble,

    #[error("malformed model file at byte {offset}: {reason}")]
    MalformedModel { offset: usize, reason: String },

    #[error("unsupported model file version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("csv parse error at row {row}, column {column}: {reason}")]
    CsvParse { row: usize, column: usize, reason: String },

    #[error("cannot place {classes} centers with separation {separation} after {attempts} attempts")]
    InfeasiblePacking { classes: usize, separation: f64, attempts: usize },

    #[error("requested {requested} samples from a dataset of {available}")]
    NotEnoughSamples { requested: usize, available: usize },

    #[error("fit failed to converge (best rms residual {best_rms})")]
    FitFailed { best_rms: f64 },

    #[error("not enough data to fit: {0}")]
    InsufficientData(String),

    #[error("fitted curve never crosses threshold {threshold} (range {lo}..{hi})")]
    NoCrossing { threshold: f64, lo: f64, hi: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
