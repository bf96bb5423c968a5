//! Training engine for a U-Net that mixes activation functions across
//! the two halves of the network: plain ReLU on the contracting
//! (encoder) path and a learnable AReLU on the expanding (decoder)
//! path. The number of decoder blocks using AReLU is a knob from 0
//! (a conventional U-Net) to 5 (every decoder block), which makes the
//! ablation over that knob a first-class operation.
//!
//! Everything runs on the CPU in `f64` on top of a small tape-based
//! reverse-mode autodiff engine built for exactly this model. Synthetic
//! spine phantoms with exact ground truth stand in for clinical data,
//! so the full pipeline — data generation, augmentation, Dice-loss
//! training with Adam and early stopping, evaluation with paired
//! t-tests, and contour extraction from predicted masks — is verifiable
//! at desk scale.
//!
//! See the crate `examples/` directory for one runnable program per
//! capability, or the `sandwich-unet` binary for the batch pipeline.

pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod contour;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
