use alloc::boxed::Box;
use alloc::string::String;

/// Errors produced by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("weights sum to zero (or below tolerance)")]
    ZeroWeight,
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("rotation alignment is not unique (rank-deficient cross-covariance)")]
    DegenerateAlignment,
    #[error("rotation angle is within tolerance of pi; geodesic is not unique")]
    NearPiRotation,
    #[error("matrix is not a proper rotation")]
    NotRotation,
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got {rows}x{cols}")]
    NotScalarLoss { rows: usize, cols: usize },
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("sample is empty")]
    EmptySample,
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("training loss became non-finite in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("part {part}: {source}")]
    Part {
        part: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn in_part(self, part: usize) -> Self {
        Error::Part {
            part,
            source: Box::new(self),
        }
    }
}
