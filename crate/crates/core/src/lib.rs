//! Early-exit diffusion lab.
//!
//! Trains a small transformer denoiser whose intermediate layers carry
//! output heads and uncertainty estimators, samples with a threshold-driven
//! adaptive-depth loop, and measures the quality/compute trade-off.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod model;
pub mod plot;
pub mod rng;
pub mod sampling;
pub mod schedule;
pub mod tensor;
pub mod training;
pub mod uem;

pub use error::{Error, Result};
