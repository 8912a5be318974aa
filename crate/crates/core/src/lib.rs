//! Data-driven predictive control toolkit.
//!
//! Builds Hankel-matrix and least-squares predictors from recorded
//! input/output data and runs three receding-horizon controllers on top of
//! them: subspace predictive control (SPC), data-enabled predictive control
//! (DeePC) and generalized DPC (GDPC), which splits the predicted input into a
//! known base sequence and a Hankel-optimised correction.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod controllers;
pub mod error;
pub mod hankel;
pub mod harness;
pub mod linalg;
pub mod predictor;
pub mod qp;
pub mod sim;

pub use error::{DpcError, Result};
