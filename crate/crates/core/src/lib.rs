//! Score-guided diffusion VAE.
//!
//! An unconditional denoiser and a Gaussian inference network are trained
//! jointly: the gradient of the inference network's log-posterior with
//! respect to the noisy image steers the denoiser toward the image a latent
//! was inferred from.

pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod networks;
pub mod numerics;
pub mod oracle;
pub mod data;
pub mod analysis;
pub mod cli;

pub use error::{Result, SamiError};
