//! Trajectory analytics with temporal and multi-agent Reeb graphs.

pub mod dataset;
pub mod error;
pub mod evalx;
pub mod events;
pub mod geo;
pub mod marg;
pub mod pipeline;
pub mod reeb;
pub mod scoring;
pub mod simgen;
pub mod spatial;
pub mod terg;
pub mod track;

pub use error::{Error, Result};
