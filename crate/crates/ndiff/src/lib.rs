//! Minimal dense-tensor compute with reverse-mode automatic differentiation.
//!
//! Tensors are immutable `f64` buffers. A [`Tape`] is rebuilt for every
//! forward pass; parameters live in a [`ParamStore`] and are bound onto the
//! tape as leaves, then updated by [`Adam`] from the gradients of a backward
//! pass.

pub mod check;
mod error;
mod kernels;
pub mod nn;
mod optim;
mod params;
mod tape;
mod tensor;

pub use error::{NdiffError, Result};
pub use optim::Adam;
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Elementwise, Gradients, Tape, Unary, Var};
pub use tensor::Tensor;
