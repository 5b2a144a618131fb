//! Weakly-supervised concealed object segmentation at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense f64 arrays and a reverse-mode gradient tape.
//! - [`grid`], [`pgm`]: 2-D grids, probability masks and the 8-bit PGM codec.
//! - [`augment`]: invertible flip/rotate/scale augmentations.
//! - [`provider`]: the promptable mask-provider contract, a noisy synthetic
//!   oracle and an on-disk mask store.
//! - [`pseudolabel`]: multi-view fusion, entropy weighting, image selection
//!   and nine-box scribble prompting.
//! - [`mfg`]: multi-scale prototype feature grouping with gated aggregation.
//! - [`model`]: a micro encoder/decoder segmenter, its losses and training.
//! - [`dataset`]: a synthetic camouflage dataset and its on-disk layout.
//! - [`evalkit`]: MAE, adaptive F-measure and IoU.
//! - [`app`]: run configuration and the commands behind the CLI.

pub mod app;
pub mod augment;
pub mod dataset;
pub mod error;
pub mod evalkit;
pub mod grid;
pub mod mfg;
pub mod model;
pub mod morph;
pub mod pgm;
pub mod provider;
pub mod pseudolabel;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use grid::{Grid, ProbMask};
