//! Dense cross-scale mesh alignment.
//!
//! A coarse-to-fine network predicts four corner offsets (a global
//! homography) plus per-vertex mesh offsets that warp a target image onto a
//! reference image. Offsets are regressed from 4D correlation tensors
//! processed through two complementary reshapes, local offsets aggregate
//! every ordered pair of unequal pyramid scales, and training combines
//! content, shape-preservation and just-noticeable-difference losses.

pub mod checkpoint;
pub mod config;
pub mod correlation;
pub mod cross_scale;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod imaging;
pub mod jnd;
pub mod losses;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
