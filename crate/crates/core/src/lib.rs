//! Hierarchical relation graphs for multi-person scene understanding:
//! individual actions, social groups with their activities, and the global
//! activity of a frame.

pub mod cli;
pub mod cluster;
pub mod data;
pub mod error;
pub mod graph;
pub mod hierarchy;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod selftest;
pub mod train;

pub use error::{Error, Result};
