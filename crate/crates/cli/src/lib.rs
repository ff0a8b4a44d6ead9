//! Command-line front end for the commute-mining toolkit: configuration
//! layering, the end-to-end ingest→filter→infer pipeline, and emission of
//! the output tables. The `pendler` binary in `main.rs` is a thin argument
//! parser over these modules.

pub mod config;
pub mod pipeline;
pub mod tables;
