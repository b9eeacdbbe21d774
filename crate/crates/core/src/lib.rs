#![cfg_attr(not(feature = "std"), no_std)]
#![cfg_attr(test, allow(unused_imports))]
//! Disentangled lung-nodule synthesis: shape generation, size modulation and
//! gated-convolution texture inpainting, plus the evaluation metrics, FROC
//! scoring and hard-example-mining augmentation built around them.
//!
//! Everything here needs only `alloc`; file formats and the command line live
//! in the companion `nodulesynth` crate.

extern crate alloc;

pub mod batch;
pub mod data;
pub mod detection;
pub mod detector;
pub mod error;
pub mod extractor;
pub mod gradcheck;
pub mod grid;
pub mod hem;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod shape_gan;
pub mod synthesis;
pub mod texture_gan;

pub use error::{Error, Result};
pub use grid::{BinaryMask, Grid, Image, Patch, PixelBounds, PATCH_SIZE};
