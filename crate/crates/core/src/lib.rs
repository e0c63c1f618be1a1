//! Multi-scale adversarial retinal vessel segmentation.
//!
//! A coarse and a fine generator produce vessel maps at two scales; two
//! autoencoder discriminators judge them per pixel and expose encoder/decoder
//! feature taps for a weighted feature-matching loss. The crate also covers
//! dataset ingestion, patching and stitching, the alternating training loop,
//! checkpoints, and the evaluation protocol (F1, sensitivity, specificity,
//! accuracy, AUC-ROC, mean IOU, SSIM).

pub mod blocks;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod conv;
pub mod data;
pub mod discriminators;
pub mod error;
pub mod eval;
pub mod generators;
pub mod infer;
pub mod losses;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
