//! Experiment harness around `bnmf-core`: declarative run configs, method
//! pipelines with seeded repetitions, and report rendering.

pub mod config;
pub mod report;
pub mod run;
