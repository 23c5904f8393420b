//! Differentiable operators recorded on a [`Tape`](crate::tape::Tape), plus
//! the tape-free kernels they are built from.

pub mod conv;
mod elementwise;
mod linalg;
pub mod nn;

pub use conv::{conv1d_dilated, ConvLayout};
pub use nn::{softmax_row_in_place, softmax_rows};

pub(crate) use elementwise::sigmoid;
