//! Training harness: synthetic data, run configuration, checkpoints,
//! training, gradient checking, scan benchmarks and visualization.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod train;
pub mod viz;
