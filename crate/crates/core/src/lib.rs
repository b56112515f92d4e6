//! Spillover-aware causal mediation analysis for cluster-randomized trials with
//! several causally unordered mediators.

pub mod data;
pub mod linalg;
pub mod nuisance;
pub mod effects;
pub mod elliptical;
pub mod error;
pub mod ecmr;
pub mod engine;
pub mod inference;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};

/// Library version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
