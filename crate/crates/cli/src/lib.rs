//! Library surface of the experiment driver, kept separate from the binary
//! so the pipeline is testable end to end.

pub mod config;
pub mod pipeline;

pub use config::ExperimentConfig;
