//! Deterministic f64 tensors with a reverse-mode tape.

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, relative_error, FdReport};
pub use kernels::broadcast_map;
pub use tape::{BatchStats, Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
