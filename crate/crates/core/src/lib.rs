//! Spiking residual networks trained with surrogate-gradient backpropagation
//! through time, with a tape-based autodiff engine, gradient diagnostics and
//! a compact binary frame-dataset format.

// `!(x <= tol)` style comparisons are deliberate: they treat NaN as a failure.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod arch;
pub mod autodiff;
pub mod block;
pub mod data;
pub mod error;
pub mod kv;
pub mod layers;
pub mod network;
pub mod neuron;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
