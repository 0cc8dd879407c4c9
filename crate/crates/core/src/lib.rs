//! Multi-resolution prediction of spot-level gene expression from histology
//! features: data handling, encoders, fusion, training and evaluation.

pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod io;
pub mod model;
pub mod nn;
pub mod synth;
pub mod train;

pub use error::{CoreError, Result};
