//! Command-line pipeline: configuration, the `prepare`/`train`/`cv`/
//! `predict`/`eval`/`heatmap` commands and heatmap export.

pub mod app;
pub mod config;
pub mod error;
pub mod heatmap;
pub mod pipeline;

pub use app::main_with_args;
