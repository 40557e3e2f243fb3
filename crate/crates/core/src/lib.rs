//! SAR-to-RGB translation with latent diffusion models.
//!
//! The crate covers the full desk-scale pipeline: paired-data preparation and
//! synthetic scene generation ([`imagery`]), a pluggable latent codec
//! ([`codec`]), a diffusion-transformer denoiser ([`backbone`]), standard
//! DDPM training/sampling with learned variance and the cold blending variant
//! ([`diffusion`]), image-quality metrics ([`metrics`]), and the two
//! downstream evaluation harnesses ([`downstream`]).

pub mod backbone;
pub mod codec;
pub mod diffusion;
pub mod downstream;
pub mod error;
pub mod imagery;
pub mod metrics;
pub mod report;

pub use error::{Error, Result};
