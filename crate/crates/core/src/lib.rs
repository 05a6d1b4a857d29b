pub mod cache;
pub mod checks;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod head;
pub mod model;
pub mod neck;
pub mod preprocess;
pub mod presets;
pub mod projection;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod voxel_branch;

pub use error::{Error, Result};
