//! Derivative estimation for noisy black-box simulations.
//!
//! Central finite differences with a perturbation chosen from the data:
//! pilot samples at several perturbations feed bootstrap moment estimates,
//! two regressions recover the bias constant and the noise variance, and the
//! pilot samples are then recycled into the final estimate. The same gradient
//! estimator drives a stochastic L-BFGS optimizer.

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod bootstrap;
pub mod dfo;
pub mod error;
pub mod estimators;
pub mod oracle;
pub mod regression;
pub mod sampling;

pub use error::{Error, Result};
