use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::tensor::TensorError;

/// Failures reading one of the binary formats.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected}, found {found}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload: needed {needed} bytes at offset {offset}, file has {len}")]
    Truncated { needed: usize, offset: usize, len: usize },
    #[error("checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("count mismatch: {0}")]
    CountMismatch(String),
    #[error("invalid content: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("architecture mismatch: expected {expected}, found {found}")]
    ArchMismatch { expected: String, found: String },
    #[error("{context}: expected shape {expected:?}, got {got:?}")]
    Shape {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("malformed target row {row}: {reason}")]
    MalformedTargets { row: usize, reason: String },
    #[error("invalid augmentation policy: {0}")]
    AugmentRange(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("class {class} has {have} images, {need} required")]
    ClassUndercount { class: usize, have: usize, need: usize },
    #[error("trajectory {trajectory} has {epochs} epochs, segment needs {needed}")]
    InsufficientEpochs {
        trajectory: usize,
        epochs: usize,
        needed: usize,
    },
    #[error("dataset fingerprint mismatch: store built for {expected}, got {found}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("training diverged at {context} {index}")]
    Divergence { context: &'static str, index: usize },
    #[error("degenerate segment: teacher displacement {0:e} below threshold")]
    DegenerateSegment(f64),
    #[error("{count} of {iterations} iterations hit degenerate segments")]
    TooManyDegenerate { count: usize, iterations: usize },
    #[error("replay diverged at step {step}: gradient checksum differs from the first pass")]
    DeterminismFault { step: usize },
    #[error("loss decomposition mismatch at iteration {iteration}: relative error {rel_err:e}")]
    DecompositionMismatch { iteration: usize, rel_err: f64 },
    #[error("eigendecomposition failed: {0}")]
    Eigen(String),
}

impl From<TensorError> for Error {
    fn from(e: TensorError) -> Self {
        Error::Autodiff(AutodiffError::Tensor(e))
    }
}

impl Error {
    /// Non-finite values anywhere in the computation.
    pub fn is_numeric_fault(&self) -> bool {
        matches!(
            self,
            Error::Autodiff(AutodiffError::Tensor(TensorError::NumericFault { .. }))
                | Error::Divergence { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
