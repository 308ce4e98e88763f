//! Density-based anomaly detection on lung CT patches.
//!
//! Volumes are tiled into lung patches, patches are embedded, a density
//! model is fitted to embeddings of normal tissue, and patients are scored
//! by aggregating per-patch negative log-densities.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the usual `f64` choice.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod encode;
pub mod error;
pub mod eval;
pub mod flow;
pub mod gmm;
mod linalg;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod score;
pub mod select;
pub mod store;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};
pub use model::{DensityModel, GenerativeModel};
pub use scalar::Scalar;
pub use score::AggregationStrategy;

pub type Gmm = gmm::GmmModel<f64>;
pub type Gmm32 = gmm::GmmModel<f32>;
pub type Flow = flow::NfModel<f64>;
pub type Flow32 = flow::NfModel<f32>;
pub type Model = model::GenerativeModel<f64>;
pub type Model32 = model::GenerativeModel<f32>;
pub type Record = score::PatientRecord<f64>;
