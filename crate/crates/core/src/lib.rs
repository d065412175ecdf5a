//! Score-guided robust unlearnable examples on small synthetic datasets.
//!
//! The pipeline learns a class-conditional score network by denoising
//! score matching, trains a surrogate classifier jointly with bounded
//! error-minimizing / score-norm-minimizing noise (adversarially, so the
//! noise survives adversarial training), and then measures how much victim
//! models trained on the protected data fail to generalize.

// NaN-rejecting checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datasets;
pub mod diff;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod models;
pub mod par;
pub mod poison;
pub mod rng;
pub mod scorelab;
pub mod victim;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
