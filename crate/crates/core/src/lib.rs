//! Core simulation library: synthetic per-subject data generation, a small
//! deterministic MLP trainer, differentially private aggregation mechanisms,
//! and a FedAvg-style federated training loop.
//!
//! Everything is seeded: identical (config, seed) pairs reproduce runs
//! bit-for-bit on the same build.

pub mod accountant;
pub mod dp;
pub mod error;
pub mod fed;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod synth;

pub use error::{CoreError, Result};
