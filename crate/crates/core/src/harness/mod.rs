//! Synthetic multi-task pretrain / few-shot-adapt harness.

pub mod config;
pub mod data;
pub mod metrics;
pub mod model;
pub mod suite;
pub mod train;
