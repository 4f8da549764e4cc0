//! Unsupervised raindrop removal by layer decomposition.
//!
//! A rainy photograph is modeled as a convex per-pixel blend of a clean
//! background and a raindrop layer, weighted by a transparency mask. A
//! single shared-weight generator refines that decomposition over several
//! feedback iterations, and two patch discriminators plus cycle, identity
//! and sparsity penalties train it from *unpaired* rainy/clean image sets.
//!
//! The crate is organized bottom-up:
//!
//! - [`decomp`] — image/mask value domain and the composition law
//! - [`nn`] — the small CPU tensor-network toolkit (conv, norm, optimizers)
//! - [`generator`] / [`discriminator`] — the two network architectures
//! - [`losses`] — the four loss terms and their gradients
//! - [`data`] — dataset layouts, cropping, and the synthetic corpus
//! - [`metrics`] — PSNR/SSIM evaluation
//! - [`checkpoint`] / [`train`] — persistence and the training loop

pub mod checkpoint;
pub mod data;
pub mod decomp;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
