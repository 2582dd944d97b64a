//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Graphs are built define-by-run: each builder call on [`Graph`] computes its
//! value immediately and records the operation. [`Graph::backward`] then walks
//! the record in reverse, and [`Graph::evaluate`] replays it with new bindings
//! for named inputs. Cosine similarity is a fused primitive with its own
//! gradient so that no intermediate norm division is differentiated.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, max_error, relative_error, LeafCheck, GRAD_CHECK_FLOOR};
pub use graph::{Graph, NodeId, COSINE_EPS};
pub use tensor::Tensor;
