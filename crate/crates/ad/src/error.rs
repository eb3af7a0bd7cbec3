use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: precision mismatch ({lhs:?} vs {rhs:?})")]
    PrecisionMismatch {
        op: &'static str,
        lhs: crate::Precision,
        rhs: crate::Precision,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    BadAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: input outside the domain ({detail})")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("tensor has {len} elements but shape {shape:?} needs {expected}")]
    ElementCount {
        shape: Vec<usize>,
        len: usize,
        expected: usize,
    },
    #[error("grad: output must be a scalar, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("grad: input #{0} is not recorded on the output's tape")]
    NotOnTape(usize),
    #[error("{op}: operands are recorded on different tapes")]
    TapeMismatch { op: &'static str },
    #[error("finite_diff: non-finite function value while perturbing coordinate {0}")]
    NonFinite(usize),
}

pub type Result<T> = std::result::Result<T, AdError>;
