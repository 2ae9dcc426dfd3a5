//! Experiment harness: configuration, experiment runners, reports and the CLI.

pub mod cli;
pub mod config;
pub mod experiments;
pub mod report;
