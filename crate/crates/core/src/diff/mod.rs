//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records primitives lazily: building a node validates shapes,
//! [`Graph::forward`] evaluates the ancestors of a root (memoizing values),
//! and [`Graph::grad_backward`] propagates adjoints from a scalar loss back to
//! every parameter of a [`ParamStore`]. [`grad_check`] compares those adjoints
//! with central finite differences.

mod check;
mod graph;
pub mod harness;
mod kernels;
mod params;

pub use check::{grad_check, GradCheckOptions, GradReport, Stencil, TensorCheck};
pub use graph::{Backward, Graph, Mode, NodeId};
pub use params::{ParamGrads, ParamStore};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} is invalid for shape {shape:?}")]
    Axis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("backward requested before the loss was evaluated")]
    NotEvaluated,
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("node {0} belongs to a different graph or does not exist")]
    UnknownNode(usize),
    #[error("loss builder is not deterministic: {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
}

#[cfg(test)]
mod tests;
