//! Reverse-mode differentiation on dense arrays.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters live
//! in a [`ParamStore`] outside the graph; [`Graph::param`] copies a parameter
//! into the tape and [`Graph::backward`] adds the resulting gradients back
//! into the store. Graphs are cheap, single-use and single-threaded.
//!
//! Broadcasting is limited to row vectors ([`Graph::add_row`],
//! [`Graph::mul_row`]) and column vectors ([`Graph::add_col`]) against
//! matrices, plus the batch tiling of [`Graph::masked_softmax`] weights.

mod backward;
mod graph;
mod optim;
mod params;
mod tensor;

use thiserror::Error;

pub use backward::Gradients;
pub use graph::{Graph, OpKind, Var, MASK_NEG};
pub use optim::{AdamW, AdamWConfig, OptimError};
pub use params::{Init, ParamGroup, ParamId, ParamStore, Parameter};
pub use tensor::{Precision, Scalar, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("index {index} out of range for table with {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
}
