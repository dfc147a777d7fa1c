//! Sparse-view CT reconstruction with a latent-conditioned neural density
//! field trained adversarially on rendered projection patches.

pub mod adversary;
pub mod cli;
pub mod data;
pub mod error;
pub mod field;
pub mod geometry;
pub mod grid;
pub mod inference;
pub mod linalg;
pub mod nn;
pub mod params;
pub mod render;
pub mod rng;
pub mod trainer;

pub use error::{Error, FormatError, Result};
