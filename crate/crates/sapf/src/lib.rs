//! Synthetic data, training, evaluation and latency benchmarking around the
//! `sapf-core` model.

pub mod bench;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod optim;
pub mod synth;
pub mod train;

pub use error::{HarnessError, Result};
