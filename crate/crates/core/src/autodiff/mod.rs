//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! replays it in reverse. Tapes are meant to live for a single training step.

mod conv;
pub mod dual;
mod gradcheck;
pub mod linalg;
pub mod ops;
mod sample;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, gradcheck_with, GradCheckOptions, GradCheckReport};
pub use ops::{concat, permute, sigmoid, softplus, BinaryKind, ReduceKind, UnaryKind};
pub use sample::bilinear_sample;
pub use tape::{BackwardFn, Gradients, Tape, Var};
pub use tensor::{broadcast_shape, Tensor};
