//! Minimal tape-based reverse-mode automatic differentiation.
//!
//! Tensors are dense row-major `f64` arrays. Operations are recorded on a
//! [`Tape`] as they execute; [`Tape::backward`] replays the backward rules in
//! reverse order. Broadcasting is limited to row-wise bias adds and the
//! affine part of layer norm; everything else requires exact shape matches.

mod check;
mod dist;
mod tape;
mod tensor;

pub use check::{finite_difference_check, finite_difference_check_sampled, relative_error};
pub use dist::{argmax, cross_entropy, entropy};
pub use tape::{Tape, Var, PROB_FLOOR};
pub use tensor::Tensor;

pub(crate) use tape::softmax_row;
