//! Multi-class ride-hailing consumer subsidy system.
//!
//! The crate covers the full offline/online loop: a synthetic confounded
//! marketplace ([`synthworld`]), a small dense-network kernel
//! ([`neuralnet`]), the three-headed uplift model ([`multenet`]), uplift
//! evaluation ([`metrics`]), budget-constrained cluster allocation
//! ([`allocator`]), rolling-horizon control ([`mpc`]) and the dictionary
//! lookup service ([`serve`]).

pub mod allocator;
pub mod domain;
pub mod error;
pub mod metrics;
pub mod mpc;
pub mod par;
pub mod rng;
pub mod serve;
pub mod multenet;
pub mod neuralnet;
pub mod pipeline;
pub mod synthworld;

pub use error::{Error, Result};
