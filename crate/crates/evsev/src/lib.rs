//! Operator-facing companion to `evsev-core`: image and checkpoint file
//! formats, flat-text run configuration, artifact emission, and the
//! `dataset | train | eval` command implementations.

pub mod artifacts;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod ppm;

pub use error::AppError;
