//! Toolkit for MALDI-TOF mass spectra: preprocessing into fixed-length bin
//! vectors, three species-conditioned generative models (VAE, GAN and a
//! denoising diffusion model), the PIKE kernel metric suite, and classifier
//! experiments that use synthetic spectra.

pub mod classify;
pub mod corpus;
pub mod error;
pub mod maldiffusion;
pub mod maldigan;
pub mod maldivae;
pub mod pike;
pub mod rng;
pub mod spectra;
pub mod tensor;
pub mod train;

pub use corpus::{LabeledCorpus, ToyCorpusSpec};
pub use error::{Error, Result};
