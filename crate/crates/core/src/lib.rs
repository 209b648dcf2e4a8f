//! Weak-label classification of multi-limb accelerometer trials.
//!
//! Trials are cut into one-second windows, projected with PCA, and pooled
//! into a positive and a negative bag. A window's increment compares its
//! kernel density under the two bags; only clearly discriminative windows
//! vote on the trial label.


pub mod baselines;
pub mod cli;
pub mod dpd;
pub mod error;
pub mod evalharness;

pub mod features;
pub mod ingest;
pub mod kv;
pub mod model;

pub mod neighbors;
pub mod seed;
pub mod synthgen;


pub use error::{Error, Result};
