//! Reverse-mode differentiable compute core.
//!
//! Exactly the primitives the classifier needs, over dense N×C double
//! matrices: shared per-instance linear maps, elementwise activations, a
//! softmax over instances, reductions and broadcasts. Plus finite-difference
//! gradient verification and an Adam optimizer.

mod adam;
mod gradcheck;
mod matrix;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{central_diff_gradient, grad_check};
pub use matrix::Matrix;
pub use tape::{softmax_slice, stable_sigmoid, NodeId, Tape};
