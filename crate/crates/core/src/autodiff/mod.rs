//! Minimal differentiable-operator core: dense tensors, the handful of
//! primitives the detection pipeline needs, reverse-mode gradients over a
//! tape, and a finite-difference gradient checker.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, no_skip, GRAD_CHECK_H, KINK_TOL};
pub use tape::{Tape, Var, COSINE_EPS};
pub use tensor::{ParamStore, Tensor};
