//! A dual-branch neural operator for time-stepping 2D fields.
//!
//! Each block mixes a learnable low-frequency rectangle of the spectrum with
//! a shared complex channel matrix, blends it back into the untouched high
//! frequencies through radially gated convex weights, and adds a local
//! depthwise/pointwise branch. Training, rollout evaluation, a pseudo-spectral
//! Kolmogorov-flow generator and empirical stability diagnostics live alongside.

pub mod autodiff;
pub mod config;
pub mod datagen;
pub mod error;
pub mod grid;
pub mod image;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod params;
pub mod spectral;
pub mod tensor;
pub mod theory;
pub mod train;

pub use error::{DriftError, Result};
pub use grid::{irfft2, rfft2, spectral_energy, Field, Spectrum};
pub use model::{DriftNet, ForwardOptions, ModelConfig, Variant};
