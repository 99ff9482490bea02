//! Simulation and verification toolkit for regime-switching conditional
//! mean-field stochastic control.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod adjoint;
pub mod bsde;
pub mod chain;
pub mod config;
pub mod error;
pub mod forward;
pub mod mp;
pub mod rng;
pub mod run;
pub mod scenario;
pub mod selftest;
pub mod stats;
#[cfg(test)]
mod testkit;
pub mod variation;

pub use error::{Error, Result};
