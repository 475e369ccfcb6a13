//! Experiment harness behind the `headsparse` binary.

pub mod commands;
pub mod config;
pub mod files;
pub mod record;
