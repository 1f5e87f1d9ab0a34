//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles during the
//! forward pass; [`Var::backward`] walks the recorded nodes in reverse
//! creation order (which is a reverse topological order, since parents always
//! exist before children) and accumulates gradients into every node that
//! requires them. [`Var::stop_gradient`] is a forward identity whose backward
//! contribution is dropped at accumulation time.

mod batchnorm;
mod conv;
mod gradcheck;
mod tape;
mod tensor;

pub use batchnorm::BatchStats;
pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};
pub use tape::{eval_primitive, Mode, Precision, PrimitiveTag, Tape, Var};
pub use tensor::{gemm, gemm_acc, Tensor};
