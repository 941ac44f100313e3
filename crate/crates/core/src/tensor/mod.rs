//! Dense tensors, a reverse-mode tape, and the primitive operations.

pub mod counter;
mod gradcheck;
mod real;
mod tape;
mod value;

pub use gradcheck::{finite_diff_grad, relative_error};
pub use real::Real;
pub use tape::{Tape, Var};
pub use value::{Mask, Tensor};
