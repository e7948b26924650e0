//! Patch-level implicit neural representation segmentation.
//!
//! An image is encoded once into a grid of patch embeddings plus one global
//! embedding. Class occupancy at any continuous coordinate is then decoded by
//! small MLPs conditioned on the embedding of the patch containing it, so masks
//! can be reconstructed at any output resolution.

pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod inference;
pub mod loss;
pub mod model;
pub mod nn;
pub mod raster;
pub mod rng;
pub mod sampling;
pub mod trainer;

pub use error::{Error, Result};
