//! Batch experiment driver: resolves a run configuration, builds models and
//! datasets, and executes the training / quantization / verification
//! pipelines, leaving checkpoints, metrics, and reports in the output
//! directory.

pub mod commands;
pub mod config;
pub mod models;
