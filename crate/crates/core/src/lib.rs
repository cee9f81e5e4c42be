//! Semantic feature distillation into Gaussian-primitive scenes and two-stage
//! pose inversion: coarse pose regression from a global embedding, then
//! render, match and RANSAC-PnP refinement.

pub mod checkpoint;
pub mod distill;
pub mod error;
pub mod features;
pub mod geometry;
pub mod gff;
pub mod harness;
pub mod image;
pub mod localization;
pub mod nn;
pub mod rng;
pub mod scene;
pub mod spine;

mod viridis;

pub use error::{Error, Result};
