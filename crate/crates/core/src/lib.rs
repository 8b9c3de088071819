//! Synthetic time-series pair generation, dual encoders and retrieval for
//! describing differences between two series in text.

pub mod bases;
pub mod config;
pub mod error;
pub mod loss;
pub mod nn;
pub mod par;
pub mod perturb;
pub mod pipeline;
pub mod query;
pub mod retrieval;
pub mod rng;
pub mod series;
pub mod storage;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorClass, Result};
