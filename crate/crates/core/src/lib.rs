pub mod adjacency;
pub mod attention;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod diff;
pub mod error;
pub mod evalkit;
pub mod features;
pub mod heads;
pub mod model;
pub mod pose;
pub mod propagation;
pub mod sampling;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
