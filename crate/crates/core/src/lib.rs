//! Sequence operators for long-context models: a multi-dimensional damped
//! EMA in recurrent and FFT forms, dilated temporal convolutional networks,
//! chunked attention and a small language model assembled from them, all on
//! a reverse-mode tape.

pub mod attention;
pub mod bench;
pub mod checkpoint;
pub mod checks;
pub mod ema;
pub mod error;
pub mod fft;
pub mod gradcheck;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod recall;
pub mod scalar;
pub mod tape;
pub mod tcn;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{Bound, ParamId, ParamStore};
pub use scalar::{DType, Scalar};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
