//! Online augmentation policy search with a sequential importance resampling
//! particle filter.
//!
//! Each particle is a vector of per-operation application probabilities.
//! During training every sample is augmented by a policy drawn from the
//! particle weights, and the weights are updated from how much a short extra
//! round of training with each policy helps on held-out samples.

pub mod augment;
pub mod data;
pub mod error;
pub mod filter;
pub mod imaging;
pub mod nn;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
pub use filter::{FilterConfig, Particle, ParticleSet};
pub use imaging::Image;
