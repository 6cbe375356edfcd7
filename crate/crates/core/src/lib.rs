//! Text-to-frequency alignment for multimodal time series forecasting.
//!
//! Stage 1 trains a VAE over low-frequency DFT features of normalized future
//! windows and a transformer that maps text embeddings into that latent space.
//! Stage 2 freezes the text branch and fuses its band-limited series with a
//! patch-based forecaster through attention.

pub mod aligner;
pub mod datagen;
pub mod diffcore;
pub mod error;
pub mod forecaster;
pub mod freqvae;
pub mod fusion;
pub mod nn;
pub mod spectral;
pub mod textrep;
pub mod training;

pub use error::{Error, Result};
