//! Localized differentially private federated convex optimization.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiment;
pub mod fedsim;
pub mod localize;
pub mod model;
pub mod privacy;
pub mod problems;
pub mod selftest;
pub mod smoothing;
pub mod solvers;
pub mod stability;

pub use error::{Error, Result};
