//! Command-line front end, instance files and the benchmark harness.

pub mod app;
pub mod harness;
pub mod instance;
pub mod report;
