//! Experiment runner for importance-guided selective fine-tuning.

pub mod commands;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod matrix;
pub mod metrics;
pub mod pipeline;
