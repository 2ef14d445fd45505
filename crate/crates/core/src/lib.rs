//! All-MLP image classifiers and the tooling to study how they scale: tensor
//! kernels, models with exact gradients, optimizers, data pipelines, training
//! loops, power-law fitting and reporting.

// `!(x > 0.0)` is how validation rejects NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod model;
pub mod optim;
pub mod report;
pub mod scaling;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, MatRef, Scalar, SeededRng, Tensor};
