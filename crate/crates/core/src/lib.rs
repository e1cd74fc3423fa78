//! Cross-modal contrastive distillation losses that tolerate semantically
//! similar negatives and rebalance anchors by how crowded their class is.
//!
//! The crate covers the whole desk-scale loop: point-to-pixel
//! correspondences, superpixel similarity and KNN masks, the four loss
//! variants with analytic gradients, a seeded synthetic data generator,
//! a small SGD trainer and a ridge linear probe.

pub mod config;
pub mod correspond;
pub mod error;
pub mod evaluate;
pub mod experiment;
pub mod losses;
pub mod matcore;
pub mod rng;
pub mod similarity;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use matcore::{BinaryMatrix, Matrix};
