//! Non-autoregressive speaker-attributed speech recognition.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root fix it to `f64`, which is what the training harness and
//! the verification suites use.

pub mod autodiff;
pub mod cif;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
#[cfg(any(test, feature = "oracles"))]
pub mod oracles;
pub mod params;
pub mod speaker;
pub mod tensor;
pub mod tsot;

pub use error::{Error, Result};
pub use tensor::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type ParamStore = params::ParamStore<f64>;
pub type Graph<'p> = autodiff::Graph<'p, f64>;
