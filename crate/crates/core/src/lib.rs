//! Multi-resolution Gaussian-process state-space models.

// NaN-rejecting guards such as `!(x > 0.0)` are written that way on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gauss;
pub mod inference;
pub mod kernel;
pub mod model;
pub mod params;
pub mod predict;
pub mod rng;
pub mod sampling;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
