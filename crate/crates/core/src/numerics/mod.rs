//! Dense tensors, tape-based reverse-mode differentiation, Adam and
//! finite-difference verification.

mod adam;
mod checkpoint;
mod gradcheck;
mod graph;
mod store;
mod tensor;

pub use adam::{adam_step, adam_step_filtered, AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use gradcheck::{finite_diff_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck, Stencil};
pub use graph::{forward_backward, Graph, Primitive, Var};
pub use store::{Param, ParamId, ParamStore};
pub use tensor::{matmul, Real, Tensor};

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("parameter mismatch: {0}")]
    Mismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
