//! Word-level intelligibility prediction from frozen ASR features.

pub mod alignpool;
pub mod featio;
pub mod fusionhead;
pub mod metrics;
pub mod textnorm;
pub mod trainer;
pub mod cli;
