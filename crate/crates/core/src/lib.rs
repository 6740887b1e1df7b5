//! Hyperspherically parameterized Wasserstein autoencoder for multimodal
//! fusion-diagnostic data (image volumes plus scalar measurements).
//!
//! The pieces, bottom to top:
//!
//! * [`autodiff`] — reverse-mode AD engine with the op set the networks need;
//! * [`data`] — synthetic surrogate dataset with an embedded linear
//!   temperature constraint, plus its binary `.jags` format;
//! * [`model`] — encoder, unit-sphere projection, generator, and latent
//!   discriminator with checkpointing;
//! * [`training`] — the two-phase adversarial training loop (generator fed
//!   sphere points, discriminator fed Euclidean latents) with Adam;
//! * [`evaluation`] — reconstruction metrics, scientific-line validity
//!   scoring, radius ablation, interpolation, local sampling, and sphere
//!   uniformity statistics;
//! * [`config`] — serializable experiment description used by the CLI.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
