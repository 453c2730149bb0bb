//! Panoptic neural fields on permutohedral hash grids, trained on CPU.

pub mod assignment;
pub mod composite;
pub mod config;
pub mod dataset;
pub mod decoders;
pub mod error;
pub mod grid;
pub mod lattice;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod octree;
pub mod optim;
pub mod pose;
pub mod render;
pub mod sampling;
pub mod scene;
pub mod trainer;
pub mod types;
pub mod util;

pub use error::{Error, Result};
