//! Dense f64 matrices and a per-pass reverse-mode differentiation graph.
//!
//! A [`Graph`] is rebuilt for every forward pass: ops append nodes eagerly,
//! [`Graph::backward`] sweeps once in reverse insertion order. Trainable
//! tensors live in a [`ParamStore`] and bind into a graph through a
//! [`Session`], which routes gradients back to the store by name.

pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};
pub use graph::{Axis, Graph, Var, LOG_CLAMP};
pub use params::{ParamStore, Session};
pub use tensor::Tensor;
