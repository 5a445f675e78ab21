//! Generative design of resilient network systems.
//!
//! The crate learns from a corpus of network designs, proposes new designs with
//! a graph variational autoencoder biased toward a performance target, screens
//! them with a graph-convolutional estimator and re-evaluates survivors with
//! Monte Carlo disruption simulation.

pub mod diff;
pub mod error;
pub mod estimator;
pub mod flow;
pub mod generator;
pub mod graph;
pub mod pipeline;
pub mod resilience;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
pub use graph::{DesignGraph, NodeClass};
