//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Everything is 64-bit. Ops are recorded on a [`Tape`] in execution order;
//! [`Tape::backward`] sweeps that order in reverse and accumulates gradients
//! by summation when a value has several consumers. Only nodes reachable from
//! a grad-requiring leaf carry gradients, so a forward pass over frozen
//! weights never pays for weight gradients.

pub mod kernels;
mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
