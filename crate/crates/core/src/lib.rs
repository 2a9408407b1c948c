//! Self-supervised forest/non-forest mapping for bistatic InSAR feature stacks.
//!
//! Convolutional-autoencoder pretext training (identity and inpainting), encoder
//! transfer into a U-Net, composite segmentation losses, stratified data selection,
//! and the evaluation protocol, all runnable on synthetic scenes.

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod matrix;
pub mod models;
pub mod nn;
pub mod raster;
pub mod report;
pub mod rng;
pub mod scene_io;
pub mod scene_synth;
pub mod training;

pub use error::{Error, Result};
pub use raster::Raster;
