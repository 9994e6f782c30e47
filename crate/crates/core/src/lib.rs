//! Stochastic multi-state car-following model for driver profiling and
//! identification.
//!
//! Drivers share a pool of Gaussian *driver states* in a learned
//! low-dimensional feature space; each driver is described by a *profile*,
//! a probability distribution over that pool. A car-following window is
//! reduced to eight hand-crafted features, standardized, projected by a
//! learnable matrix `A`, and scored against every profile.
//!
//! Module map:
//!
//! * [`domain`]: sequences, validation and fixed-length resampling.
//! * [`features`]: hand-crafted features, standardization, projection.
//! * [`model`]: Gaussian state pool, driver profiles, EM, inference, registration.
//! * [`training`]: joint projection learning with adaptive learning rate.
//! * [`synthdata`]: deterministic synthetic car-following corpora.
//! * [`eval`]: accuracy, confusion matrices, multi-sequence trials, sweeps.
//! * [`io`] and [`report`]: on-disk formats (CSV, model JSON, SVG charts).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod domain;
pub mod error;
pub mod eval;
pub mod features;
pub mod io;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod report;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
