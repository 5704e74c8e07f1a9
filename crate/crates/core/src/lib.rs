pub mod aggregators;
pub mod attacks;
pub mod clustering;
pub mod config;
pub mod data;
pub mod error;
pub mod nn;
pub mod orchestrator;
pub mod report;
pub mod rng;
pub mod similarity;
pub mod train;

pub use error::{Error, Result};
