//! Learned on-board routing for LEO satellite constellations.
//!
//! The crate is organised as a pipeline:
//!
//! - [`constellation`] builds Walker constellations, propagates circular orbits and
//!   derives inter-satellite-link topology snapshots.
//! - [`graph`] holds adjacency matrices, the normalized convolution support and the
//!   destination-conditioned node features.
//! - [`oracle`] computes exact hop distances and shortest paths and assembles the
//!   labeled training dataset.
//! - [`gnn`] is the dual-extractor graph convolution regressor with explicit
//!   reverse-mode gradients and an Adam training loop.
//! - [`routing`] implements the learned router and the TBR/TSR/CGR baselines.
//! - [`sim`] runs interruption-aware packet experiments and aggregates metrics.

mod codec;
pub mod config;
pub mod constellation;
pub mod error;
pub mod gnn;
pub mod graph;
pub mod oracle;
pub mod rng;
pub mod routing;
pub mod sim;

pub use error::{Error, Result};
