//! Experiment driver: configuration, the train/encode/eval pipeline and
//! report generation.

pub mod config;
pub mod image;
pub mod manifest;
pub mod pipeline;
pub mod report;
