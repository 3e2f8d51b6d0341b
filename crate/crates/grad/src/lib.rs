//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Built for small models evaluated on the CPU at double precision. The
//! graph supports gradients of gradients, which the R1 penalty requires.

pub mod check;
mod ops;
pub mod optim;
pub mod tensor;
mod var;

pub use optim::{Adam, AdamState};
pub use tensor::Tensor;
pub use var::{backward, grad, is_grad_enabled, no_grad, GradModeGuard, Var};
