// SPDX-License-Identifier: MIT OR Apache-2.0

//! A small, fully instrumented mixture-of-experts transformer with
//! constructively planted relational knowledge, logit-lens attribution,
//! routing interventions and the usual retrieval metrics.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the working precision at `f64`.

pub mod analysis;
pub mod attribution;
pub mod error;
pub mod interventions;
pub mod knowledge;
pub mod math;
pub mod model;
pub mod scalar;
pub mod seed;
pub mod stats;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Weights = model::ModelWeights<f64>;
pub type Trace = model::ForwardTrace<f64>;
