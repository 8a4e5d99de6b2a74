//! Per-modality latent distribution alignment for multi-modal segmentation
//! under missing modalities.

pub mod commands;
pub mod config;
pub mod dataio;
pub mod error;
pub mod evalrep;
pub mod gradcheck;
pub mod latent_align;
pub mod nets;
pub mod regimes;
pub mod theory;

pub use error::{Error, Result};
