//! Multi-source masked autoencoder for satellite imagery, together with the
//! data pipeline that feeds it: synthetic multi-sensor regions, the EVSH shard
//! format, curation heuristics, tokenization, composite encodings, masking,
//! masked-reconstruction training and gradient verification.

pub mod curation;
pub mod encoding;
pub mod error;
pub mod masking;
pub mod model;
pub mod region;
pub mod rng;
pub mod shard;
pub mod synth;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use region::{Dtype, Region, SourceProfile, SourceTensor, TensorData, Timestamp};

/// Side length of the common image grid every source is resized to.
pub const IMAGE_SIZE: usize = 224;
/// Side length of a square patch.
pub const PATCH_SIZE: usize = 16;
/// Patches per side of the common grid.
pub const GRID_SIZE: usize = IMAGE_SIZE / PATCH_SIZE;
/// Tokens produced per (timestep, source) slice.
pub const NUM_PATCHES: usize = GRID_SIZE * GRID_SIZE;
