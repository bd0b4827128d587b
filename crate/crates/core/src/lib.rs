//! Conditional latent diffusion speech enhancement with dual-context learning.

pub mod audio;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dcl;
pub mod denoiser;
pub mod diffusion;
pub mod enhance;
pub mod eval;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod parallel;
pub mod plot;
pub mod vae;

pub use error::{Error, Result};
