//! Runtime around `onestep-core`: seeded synthetic data and CSV files, a
//! coordinator/worker cluster over in-process or TCP transports, repeated
//! experiments with MSE reports, and the `onestep` command line.

pub mod cli;
pub mod cluster;
pub mod data;
pub mod experiment;
pub mod presets;
pub mod rng;

pub use onestep_core as core;
