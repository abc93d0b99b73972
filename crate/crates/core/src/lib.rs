//! Channel-independent patch Transformer for long-horizon forecasting.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod patching;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
