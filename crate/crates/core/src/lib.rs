//! Discovering, ablating and steering with language-specific sparse-autoencoder
//! features in a small multilingual transformer trained on synthetic parallel
//! languages.

pub mod activations;
pub mod binio;
pub mod error;
pub mod experiments;
pub mod interventions;
pub mod monolinguality;
pub mod pipeline;
pub mod sae;
pub mod synthlang;
pub mod tinylm;

pub use error::{Error, Result};
