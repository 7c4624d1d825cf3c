//! Toy-scale diffusion laboratory.
//!
//! A small U-Net denoiser is pretrained on a two-ring 2D mixture, then
//! steered toward one ring by zero-initialized adapters that add
//! `w·B_φ(t, c)` to selected hidden features while the backbone stays frozen.
//! Closed-form Gaussian-mixture scores check the Bayes split of the
//! conditional denoiser into prior denoiser plus steering term.

pub mod backbone;
pub mod conditions;
pub mod config;
pub mod datasets;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod nn;
pub mod oracle;
pub mod steering;
pub mod training;

pub use error::{Error, Result};
