//! Stereo-pair face authentication research kit.
//!
//! The pipeline never reconstructs depth: the verification network consumes a
//! raw stereo crop pair plus per-pixel coordinate maps that preserve where the
//! crops came from in the scene, which is enough to encode geometry implicitly.
//!
//! Crate layout:
//! - [`tensor`] — dense f32 tensors, reverse-mode autodiff, SGD, checkpoints.
//! - [`facegen`] — procedural synthetic stereo face dataset generator.
//! - [`pipeline`] — cropping, normalization, coordinate maps, augmentation.
//! - [`recognet`] — embedding networks, angular-margin heads, auxiliary
//!   passport decoder.
//! - [`train`] — two-stage training orchestration (mono pretrain, stereo).
//! - [`eval`] — open-set verification metrics (ROC, FNR at FPR, breakdowns,
//!   ablations).
//! - [`spoof`] — flat-projection attack simulation and liveness classifier.

pub mod error;
pub mod parallel;
pub mod rng;
pub mod tensor;

pub mod facegen;
pub mod image;
pub mod pipeline;
pub mod recognet;

pub mod eval;
pub mod spoof;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
