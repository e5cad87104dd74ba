//! Offline reinforcement learning with geometric pessimism.
//!
//! Dataset rows are embedded as `[norm(s), a]`, scored by their mean distance
//! to the `k` nearest other rows, standardised with a quantile threshold and a
//! median-absolute-deviation spread, and turned into a per-row reward penalty.
//! The penalty table is computed once; implicit Q-learning then subtracts the
//! looked-up penalty inside its critic target.

pub mod approximator;
pub mod benchmark;
pub mod boundcheck;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod envbench;
pub mod error;
pub mod geometry;
pub mod knn;
pub mod metrics;
pub mod trainer;

pub use error::{Error, Result};
