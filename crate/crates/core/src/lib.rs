//! Toy monocular 3D detection transformer for studying query denoising.
//!
//! The crate contains a small reverse-mode autodiff core ([`numerics`]), box
//! geometry, mask-separated group attention, variational query generation,
//! Hungarian matching, forward-looking distillation across decoder layers,
//! a synthetic scene generator with AP@40 evaluation, attention diagnostics
//! and the training loop that ties them together.

pub mod attention;
pub mod config;
pub mod diagnostics;
pub mod distill;
pub mod error;
pub mod geometry;
pub mod gradsuite;
pub mod losses;
pub mod matching;
pub mod model;
pub mod numerics;
pub mod scenes;
pub mod train;
pub mod vqd;

pub use error::{Result, VqdError};
