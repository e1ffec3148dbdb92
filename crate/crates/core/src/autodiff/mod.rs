//! Dense tensors and tape-based reverse-mode differentiation.
//!
//! A [`Tape`] is owned by one thread and scoped to one forward pass. Frozen
//! models run on a throwaway tape whose leaves are all constants, so nothing
//! they compute can receive a gradient.
//!
//! Batch parallelism is not done by sharding tapes: the convolution kernels
//! walk the batch in a fixed order and accumulate weight gradients image by
//! image, so gradients are bit-identical from run to run regardless of how
//! the process is scheduled.

mod conv;
pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{sigmoid, softmax_channels, BackwardReport, Fault, Tape, Var};
pub use tensor::{Real, Tensor};
