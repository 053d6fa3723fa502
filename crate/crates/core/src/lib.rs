pub mod commands;
pub mod config;
pub mod data;
pub mod dpr;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod predictor;
pub mod prototypes;
pub mod rng;
pub mod training;
pub mod vpir;

pub use error::{Error, Result};
