//! A compact reverse-mode autodiff engine over dense `f64` tensors.
//!
//! Convolution, batched matmul and the spatial kernels split their work
//! across the batch (or plane) axis through [`par`], which uses rayon when
//! the `parallel` feature is on and falls back to plain loops otherwise.

pub mod gradcheck;
pub mod io;
pub mod kernels;
mod ops;
pub mod par;
pub mod params;
pub mod tensor;
pub mod var;

pub use kernels::PadMode;
pub use params::{Adam, AdamConfig, Binder, ParamStore};
pub use tensor::Tensor;
pub use var::Var;
