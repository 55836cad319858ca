//! Fisher-information remediation of fragmentation-induced covariate shift.
//!
//! The crate is organised bottom-up:
//!
//! - [`numkernel`]: flat parameter vectors, packed symmetric matrices, symmetric
//!   eigendecomposition and the seeded random source.
//! - [`model`]: small softmax MLPs with exact gradients and per-sample scores.
//! - [`fisher`]: empirical Fisher estimates (full, diagonal, low-rank) and the
//!   algebra the trainers need (mixing, EMA, weighted aggregation,
//!   preconditioning, wire payloads).
//! - [`batchfire`]: the batchwise Fisher-accumulation trainer and its SGD baseline.
//! - [`fedsim`]: an in-process federated simulation with byte accounting.
//! - [`shiftlab`]: covariate-shift induction, density-ratio diagnostics and
//!   numerical checks of the KL/Fisher bounds.
//! - [`synth`]: synthetic datasets used by the experiments.

pub mod batchfire;
pub mod error;
pub mod fedsim;
pub mod fisher;
pub mod model;
pub mod numkernel;
pub mod shiftlab;
pub mod synth;

pub use error::{FireError, Result};
