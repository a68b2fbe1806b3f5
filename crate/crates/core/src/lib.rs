//! Hyperparameter-calibrated dataset condensation for linear convolution
//! models: datasets, filters, IFT hypergradients, condensation by gradient
//! matching and by hypergradient alignment, and numerical oracles.

// NaN-rejecting checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod derivatives;
pub mod error;
pub mod eval;
pub mod filters;
pub mod hcdc;
pub mod hypergrad;
pub mod linalg;
pub mod model;
pub mod report;
pub mod sdc;
pub mod theory;
pub mod verify;

pub use error::{HcdcError, Result};
pub use linalg::Mat;
