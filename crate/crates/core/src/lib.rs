//! Mean-teacher semi-supervised segmentation.
//!
//! The crate is organized around the pieces of a mean-teacher training run:
//!
//! * [`losses`]: Dice segmentation loss and pixel-wise BCE consistency loss.
//! * [`ema`]: the teacher as an exponential moving average of the student.
//! * [`schedules`]: consistency-weight ramp-up and learning-rate schedule.
//! * [`augment`]: rotation + Gaussian noise with delayed (post-forward)
//!   spatial alignment of the teacher prediction.
//! * [`model`]: a 15-convolution 2D U-Net with hand-written backprop.
//! * [`data`]: NIfTI ingestion, slicing, subject splits, batching and a
//!   synthetic dataset generator.
//! * [`trainer`]: the training loop, checkpoints, evaluation and multi-run
//!   experiments.
//! * [`metrics`]: confusion-matrix metrics and multi-run aggregation.
//! * [`config`]: run configuration files and presets used by the CLI.

pub mod augment;
pub mod cli;
pub mod config;
pub mod data;
pub mod ema;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod real;
pub mod rng;
pub mod schedules;
pub mod trainer;

pub use error::{Error, Result};
pub use real::Real;
