//! Reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor)s.
//!
//! A [`Graph`] records every operation as it executes. Calling
//! [`Graph::backward`] on a scalar node walks the record in reverse and
//! accumulates gradients into every node that depends on a
//! [`Graph::param`] leaf. Everything runs on one thread and in a fixed order,
//! so identical inputs always give bit-identical values and gradients.

mod gradcheck;
mod graph;
pub(crate) mod kernels;

pub use gradcheck::{gradient_check, gradient_check_many, GradCheckReport};
pub use graph::{Graph, NodeId};
pub use kernels::UpsampleMode;
