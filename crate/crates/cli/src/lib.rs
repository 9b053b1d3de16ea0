//! Command-line front end: one subcommand per experiment stage, all driven
//! by a single run configuration and seed.

pub mod app;
pub mod config;
pub mod pipeline;

pub use config::{Overrides, RunConfig};
