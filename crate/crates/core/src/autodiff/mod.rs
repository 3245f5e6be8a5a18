//! Reverse-mode automatic differentiation over dense arrays.
//!
//! Graphs are built eagerly: every operation computes its value as it is
//! recorded, and [`Graph::backward`] walks the record in reverse. Parameters
//! are named leaves, and gradient maps are keyed (and therefore ordered) by
//! those names.

mod array;
mod gradcheck;
mod graph;

pub use array::Array;
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use graph::{Gradients, Graph, KeyMask, NodeId};


use std::collections::BTreeMap;

/// Named arrays sorted lexicographically by name.
pub type ParamMap<T> = BTreeMap<String, Array<T>>;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch at {node}: {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("parameter {0:?} registered twice")]
    DuplicateParam(String),
    #[error("cross-entropy called without any target positions")]
    EmptyTargets,
}

/// Concatenation of the arrays of `params` in name order, each row-major.
pub fn flatten<T: crate::Scalar>(params: &ParamMap<T>) -> Vec<T> {
    params.values().flat_map(|a| a.data().iter().copied()).collect()
}
