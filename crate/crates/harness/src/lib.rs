//! Experiment harness: synthetic tasks, training, evaluation, checkpoints and
//! the `condcomp` command line.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod train;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
