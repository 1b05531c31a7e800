//! Deterministic simulator for partial-model federated learning with clients that
//! join over time, on small dense networks.
//!
//! Known clients train locally under two proximal terms (a pull toward their
//! cluster model and a Fisher-masked elastic pull), condense a *learnGene* (the
//! top-γ layer units by update-similarity score) and upload only that gene. The
//! server averages genes per cluster, and agnostic clients joining later are routed
//! to the nearest cluster by an SVD signature of their data and initialized from
//! that cluster's gene.

pub mod checkpoint;
pub mod client;
pub mod data;
pub mod error;
pub mod genecraft;
pub mod harness;
pub mod nn;
pub mod privacy;
pub mod rng;
pub mod server;

pub use error::{Error, Result};
pub use nn::{Batch, GradientSet, LayeredParams, MlpSpec, OptState, Real};
