//! Minimal reverse-mode autodiff over dense f64 tensors, an Adam optimizer,
//! and a finite-difference gradient oracle.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{finite_diff_gradient, max_rel_error};
pub use graph::{Graph, NodeId};
pub use params::{Gradients, ParameterStore};
pub use tensor::Tensor;
