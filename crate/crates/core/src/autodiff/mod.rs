//! Dense-tensor reverse-mode automatic differentiation and the Adam optimizer.

pub mod adam;
pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheck};
pub use tape::{BinaryKind, ElementwiseKind, ReduceKind, Tape, UnaryKind, Var, LOG_FLOOR};
pub use tensor::{broadcast_shape, Tensor};
