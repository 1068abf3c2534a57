//! Experiment plumbing: datasets, configuration, checkpoints, training and
//! the command-line front end.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod train;
