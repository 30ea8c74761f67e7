//! Dense `f64` tensors with a recording tape for reverse-mode differentiation.
//!
//! Forward operations are methods on [`Graph`]; each appends a node holding
//! its value and enough cached state for the backward rule. Learnable tensors
//! live in a [`ParamStore`] and enter a graph through [`Graph::param`].

mod error;
mod gradcheck;
mod graph;
mod param;
mod suite;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_params, relative_error, EntryCheck, GradCheckReport};
pub use graph::{Graph, Mode, Var};
pub use param::{ParamId, ParamStore, Parameter};
pub use suite::primitive_suite;
pub use tensor::Tensor;
