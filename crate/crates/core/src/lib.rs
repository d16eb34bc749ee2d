//! Regularized empirical risk minimization for GLMs with non-smooth
//! penalties and convex constraints, together with exact leave-one-out
//! risk (LO), Monte Carlo out-of-sample risk (OO), and audits of the
//! finite-sample inequalities that tie them together.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod exec;
pub mod model;
pub mod penalty;
pub mod risk;
pub mod rng;
pub mod solver;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
pub use exec::Execution;
