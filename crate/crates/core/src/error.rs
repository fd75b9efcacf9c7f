//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any stage of the registration machinery.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or out-of-contract input (non-square matrix, dim mismatch, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Matrix is singular to machine precision.
    #[error("singular matrix: {0}")]
    SingularMatrix(String),

    /// The principal matrix logarithm does not exist: an eigenvalue lies on the
    /// closed negative real half-line.
    #[error("matrix logarithm not defined: eigenvalue {re}{im:+}i lies on the closed negative real half-line")]
    LogNotDefined { re: f64, im: f64 },

    /// Linear part reverses orientation (det <= 0), so no rotation/stretch
    /// factorization exists.
    #[error("orientation-reversing linear part (det = {det})")]
    OrientationReversing { det: f64 },

    /// Point configuration too degenerate to constrain the requested model.
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    /// Not enough common labels to pair the two point sets.
    #[error("insufficient correspondence: {found} common labels, need at least {needed}")]
    InsufficientCorrespondence { found: usize, needed: usize },

    /// A label volume contains no usable (non-background, non-excluded) labels.
    #[error("empty segmentation: no retained labels")]
    EmptySegmentation,

    /// All kernel weights underflowed and the background weight is zero, so the
    /// fused velocity is 0/0 at this voxel.
    #[error("indeterminate weights at voxel ({0}, {1}, {2}): all kernels underflowed and background weight is zero")]
    IndeterminateWeight(usize, usize, usize),

    /// Scaling-and-squaring produced non-finite values.
    #[error("integration diverged: non-finite value at squaring step {step}")]
    IntegrationDiverged { step: u32 },

    /// Volume file uses a feature outside the supported subset.
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    /// Volume file is structurally broken (truncated payload, bad magic, ...).
    #[error("corrupt file: {0}")]
    CorruptFile(String),

    /// Two volumes expected on the same grid are not.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),

    /// A pipeline stage failed; wraps the stage name around the cause.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,

        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Attach a pipeline stage name to an error bubbling out of that stage.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
