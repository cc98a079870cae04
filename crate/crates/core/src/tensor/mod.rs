//! Dense tensors, the op set used by the models, and reverse-mode gradients.

mod adam;
mod dense;
mod gradcheck;
mod graph;
pub mod ops;
mod param;
mod scalar;

#[cfg(test)]
mod tests;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use dense::Tensor;
pub use gradcheck::{check_gradients, GradCheckReport};
pub use graph::{BackwardReport, Eager, Graph, Tape, Var};
pub use ops::ApplyPlan;
pub use param::{bind_specs, register_specs, Initializer, ParamId, ParamSpec, Parameter, ParameterSet};
pub use scalar::Scalar;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape {shape:?} needs a different element count than {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("expected rank {expected}, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("parameter set does not match the recorded parameters")]
    ParameterSetMismatch,
    #[error("duplicate parameter name {0:?}")]
    DuplicateParameter(String),
    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),
}
