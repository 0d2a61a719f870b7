//! Blur-robust instance retrieval.
//!
//! The crate covers the whole pipeline: synthesizing motion-blurred object
//! images from an alpha-matting formation model ([`blur_synth`]), generating a
//! retrieval dataset with blur-level annotations ([`dataset`]), a descriptor
//! network with blur-estimation, localization and classification heads
//! ([`model`]) trained with [`losses`] and blur-windowed contrastive sampling
//! ([`sampler`]), and mAP evaluation broken down by blur level
//! ([`retrieval`]). [`train`] ties them together; the `blurret` binary exposes
//! the pipeline on the command line.

pub mod blur_synth;
pub mod config;
pub mod dataset;
pub mod error;
pub mod losses;
pub mod model;
pub mod raster;
pub mod retrieval;
pub mod rng;
pub mod sampler;
pub mod train;

pub use error::{Error, Result};
