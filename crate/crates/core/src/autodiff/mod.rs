//! Reverse-mode automatic differentiation over explicitly unrolled graphs.

mod graph;
pub mod kernels;

pub use graph::{BatchStats, Graph, Var};
