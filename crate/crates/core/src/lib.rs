//! Video-level classification from frame detections with spatiotemporal graphs
//! and an edge-aware graph transformer.
//!
//! The pipeline is: detection streams ([`detection`]) or synthetic ones ([`synth`]),
//! graph construction ([`graph`]), the attention model ([`model`]), training
//! ([`train`]), and metrics, sweeps and exports ([`eval`]). [`config`] bundles all
//! settings behind a single master seed.

pub mod config;
pub mod detection;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
