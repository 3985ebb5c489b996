//! RGB-D salient object detection.
//!
//! Dual ResNet-50 encoders (RGB + replicated depth), per-stage position and
//! channel mutual attention fusion, and a cascade transformer-infused
//! reconstruction decoder with four deeply supervised saliency heads, plus
//! the training loop and the saliency evaluation metrics used to score
//! predictions.

pub mod backbones;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod pvt;
pub mod train;

pub use error::{Error, Result};
