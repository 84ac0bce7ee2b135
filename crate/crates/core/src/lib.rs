//! Hierarchical association rule modeling for sequential event prediction.
//!
//! The crate mines time-ordered rules `a → b` from per-patient encounter
//! histories, fits a hierarchical Beta-Binomial model over the per-patient
//! rule probabilities with a Metropolis-within-Gibbs sampler, updates
//! predictions online through conjugacy, and evaluates next-event
//! prediction against adjusted-confidence and minimum-support rankers.

pub mod error;
pub mod eval;
pub mod events;
pub mod model;
pub mod online;
pub mod rules;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
