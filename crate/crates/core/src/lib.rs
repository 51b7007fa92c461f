//! Training and analysis of neural networks under simulated analog weight noise.

pub mod analysis;
pub mod data;
pub mod engine;
pub mod experiment;
pub mod models;
mod error;
pub mod noise;
pub mod quant;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
