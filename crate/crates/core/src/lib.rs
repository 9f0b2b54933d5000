pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod predictor;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod training;

pub use error::{Error, Result};
