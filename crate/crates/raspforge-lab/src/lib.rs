//! Experiment orchestration: config files, run directories, checkpoint
//! evaluation, CSV metrics and SVG plots.

pub mod config;
pub mod experiment;
pub mod metrics;
pub mod plot;
