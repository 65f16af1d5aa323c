//! Long-tail recognition training toolkit.
//!
//! Builds exponentially imbalanced dataset splits, trains an encoder/classifier
//! network with a composite objective (supervised contrastive loss, a
//! label-distribution-aware margin classifier, and a rare-class feature-space
//! sample generator), evaluates overall/grouped accuracy and intra-class
//! distance, and searches loss weights with a small genetic algorithm.

pub mod config;
pub mod data;
pub mod error;
pub mod ga;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod rsg;
pub mod tensor;
pub mod trainer;

pub mod cli;

pub use error::{Error, Result};
