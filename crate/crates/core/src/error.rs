use thiserror::Error;

use crate::harness::TrainReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("kernel sides must be odd, got {0}x{1}")]
    EvenKernel(usize, usize),
    #[error("class index {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NotScalarRoot(Vec<usize>),
    #[error("variable does not belong to this tape")]
    DetachedTensor,
    #[error("unknown attach point `{0}`")]
    UnknownAttachPoint(String),
    #[error("width mismatch at attach point `{point}`: expected {expected}, got {actual}")]
    WidthMismatch {
        point: String,
        expected: String,
        actual: String,
    },
    #[error("sparsity mask has no active channel")]
    EmptyMask,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("least-squares system is singular")]
    SingularSystem,
    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error("corrupt blob: {0}")]
    CorruptBlob(String),
    #[error("checksum mismatch: manifest {expected:08x}, blob {actual:08x}")]
    ChecksumMismatch { expected: u32, actual: u32 },
    #[error("model is frozen; its parameters cannot be trained")]
    FrozenModel,
    #[error("training diverged at epoch {}", .0.epochs_completed())]
    Diverged(Box<TrainReport>),
    #[error("freeze violated: base parameters changed during adapter training")]
    FreezeViolated,
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for failures caused by the numbers rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::Diverged(_) | Error::SingularSystem
        )
    }
}
