//! Learning low-rank morphable surface models, cameras, and illumination
//! from collections of 2D point observations.

pub mod correspond;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod imageio;
pub mod lux;
pub mod model;
pub mod objective;
pub mod optim;
pub mod render;
pub mod solver;
pub mod synth;

pub use error::{Error, Result};
