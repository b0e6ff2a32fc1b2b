//! Files in and out: datasets, synthetic data, results, checkpoints.

pub mod checkpoint;
pub mod dataset;
pub mod report;
pub mod synth;
