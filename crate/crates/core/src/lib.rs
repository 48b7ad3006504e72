//! Crossing-intention prediction for tracked pedestrians.
//!
//! The crate takes per-frame pedestrian tracks (bounding boxes, skeleton
//! keypoints, ego-vehicle motion), derives position-decoupled motion features,
//! and classifies whether the pedestrian will cross in front of the ego
//! vehicle within the next one to two seconds. The network fuses three
//! modality encoders (position, ego motion, skeleton graph convolutions) and
//! models the temporal dimension with a Transformer encoder.
//!
//! Everything is CPU-only, 64-bit, and deterministic: a run seeded the same
//! way replays bit-exactly, including dropout masks, weight initialization,
//! batch order, and checkpoint bytes.
//!
//! Module map:
//! - [`tensor`]: dense tensors plus reverse-mode automatic differentiation
//! - [`features`]: raw feature extraction (disparity deltas, area ratio,
//!   displacement/velocity, ego acceleration, skeleton graph)
//! - [`model`]: the network itself and its checkpoint format
//! - [`data`]: annotation ingestion, window sampling, split generation
//! - [`synthetic`]: seeded scenario generator used as a desk-scale oracle
//! - [`training`]: optimizers, scheduler, epoch loop
//! - [`evaluation`]: metrics, sweeps, attention export, latency benchmark

pub mod config;
pub mod data;
pub mod evaluation;
pub mod features;
pub mod model;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use tensor::{Tape, Tensor, TensorError, Var};
