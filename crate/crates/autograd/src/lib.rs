//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records operations eagerly: every call computes its value
//! immediately and appends a node to the tape. [`Graph::backward`] then sweeps
//! the tape once in reverse. Index- and segment-based operations
//! ([`Graph::gather_rows`], [`Graph::segment_sum`], ...) cover the
//! neighbourhood gathers and reductions used by point-cloud layers.

pub mod check;
mod graph;
mod tensor;

pub use graph::{Gradients, Graph, Segments, Var};
pub use tensor::Tensor;
