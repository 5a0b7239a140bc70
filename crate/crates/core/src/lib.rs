//! Latent-space image obfuscation.
//!
//! An image is inverted into the latent space of a differentiable generator,
//! the latent matrix is low-pass filtered with a Gaussian kernel, and the
//! result is regenerated. The crate also ships the pixel-space baselines,
//! fidelity metrics and a re-identification harness used to evaluate them.

pub mod error;
pub mod generator;
pub mod image;
pub mod inversion;
pub mod latent_file;
pub mod metrics;
pub mod obfuscation;
pub mod optim;
pub mod perception;
pub mod threat;

pub use error::{Error, Result};
