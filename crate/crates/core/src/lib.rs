// Comparisons like `!(x > 0.0)` are written negated on purpose: they also
// reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datasets;
pub mod error;
pub mod fields;
pub mod fitting;
pub mod geometry;
pub mod linalg;
pub mod metrics;
pub mod neuralnet;
pub mod rng;
pub mod studies;
pub mod tomography;

pub use error::{Error, Result};
