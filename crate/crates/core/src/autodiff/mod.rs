//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation of a forward pass in creation order.
//! [`Tape::backward`] walks that record once in reverse and returns the
//! gradient of a scalar root with respect to every node that requires one.
//! The op set is exactly what small MLP models need: matmul / affine maps,
//! bias add, elementwise add/mul/scale, ReLU, sum, and the two losses.

mod gradcheck;
pub(crate) mod kernels;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many};
pub use kernels::argmax;
pub use optim::{sgd_step, Sgd, SgdConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
