//! Minimal dense tensor core: a reverse-mode tape over double-precision
//! tensors, the Adam optimizer, finite-difference gradient checking and a
//! binary parameter checkpoint container.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod param;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport, FD_STEP};
pub use graph::{softmax_in_place, Graph, Var, PROB_CLAMP};
pub use param::{Param, ParamId, ParamStore};
pub use tensor::Tensor;
