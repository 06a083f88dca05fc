//! Koopman models of serial manipulators in generalized-momentum coordinates.
//!
//! The crate covers the full pipeline: ground-truth rigid-body simulation,
//! neural lifting functions, linear and bilinear Koopman predictors, training,
//! a linear extended state observer, condensed linear MPC with an ADMM QP
//! solver, and the experiment harness that ties them together.

pub mod dynamics;
pub mod error;
pub mod geso;
pub mod harness;
pub mod koopman;
pub mod lifting;
pub mod mpc;
pub mod qp;
mod serde_util;
pub mod training;

pub use error::{Error, Result};
