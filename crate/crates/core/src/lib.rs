//! Domain-mixture design for steering a small language model toward a
//! target in log-likelihood space.
//!
//! The crate generates synthetic Markov domains, trains a byte-level
//! transformer on weighted domain mixtures, places models in LL space via
//! double-centered per-text log-likelihoods, and estimates mixture weights
//! from the log-likelihood difference to a target.

pub mod corpus;
pub mod digest;
pub mod error;
pub mod llspace;
pub mod mixopt;
mod parallel;
pub mod plot;
pub mod recipes;
pub mod rng;
pub mod tinylm;
pub mod verify;

pub use error::{Error, Result};
pub use parallel::is_parallel;
