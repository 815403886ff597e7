//! The `glyphforge` command line: dataset generation, both training stages, sampling,
//! evaluation, manifest verification, and the annotation service.

pub mod commands;
pub mod config;
pub mod server;
