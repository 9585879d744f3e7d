//! Dense tensors with reverse-mode differentiation, the Adam optimizer and
//! a per-thread FLOP counter.

pub mod flops;
mod optim;
mod tensor;

pub use optim::{adam_step, AdamConfig, OptimizerState};
pub use tensor::{no_grad, Tape, Tensor};
