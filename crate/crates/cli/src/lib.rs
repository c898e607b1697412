//! Command-line driver for the chunk prediction encoder toolkit.

pub mod app;
pub mod config;
pub mod pipeline;

pub use config::ExperimentConfig;
