//! Continual learning with flat regions: train each task toward a flat
//! minimum, estimate how flat every parameter is, and keep later tasks
//! inside the previous task's flat region.

// `!(x >= 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod flat_optim;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod probe;
pub mod replay;
pub mod runner;
pub mod tensor;

pub use error::{Error, Result};
