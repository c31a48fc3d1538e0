//! Dense f64 tensors with reverse-mode differentiation.
//!
//! Shapes are row-major and explicit; the only broadcasting is the
//! `*_suffix` / `*_prefix` family, so shape errors surface early. Tensors
//! are immutable once built. Gradients accumulate on leaves created with
//! [`Tensor::param`] when [`Tensor::backward`] runs on a scalar.

pub mod conv;
pub mod error;
#[doc(hidden)]
pub mod fault;
pub mod gradcheck;
pub mod nn;
mod ops;
pub mod optim;
pub mod params;
mod tensor;

pub use conv::Conv2dSpec;
pub use error::{Result, TensorError};
pub use params::ParamSet;
pub use tensor::{no_grad, NoGradGuard, Tensor};
