//! Dense tensors and reverse-mode differentiation for exactly the operation
//! set the matcher needs.

mod gradcheck;
mod graph;
mod plan;
mod tensor;

pub use gradcheck::{check_gradients, check_gradients_at, GradCheckReport};
pub use graph::{Gradients, Graph, Var, NLL_FLOOR};
pub(crate) use graph::{dots_into, softmax_in_place};
pub use plan::IndexPlan;
pub use tensor::{topk, Scalar, Tensor};
