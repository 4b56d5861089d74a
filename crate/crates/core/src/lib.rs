//! Conditional 3D diffusion synthesis with an image-level training
//! constraint.
//!
//! The crate covers the whole pipeline at desk scale: a small reverse-mode
//! autodiff engine, a 3D U-Net noise predictor, forward corruption and
//! ancestral sampling, a hybrid noise + image loss, latent-space
//! diffusion behind a frozen autoencoder, SUVr/Centiloid quantification,
//! volumetric quality metrics and deterministic synthetic phantoms.

pub mod autodiff;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod latent;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod trainer;
pub mod volume;

pub use error::{Error, FormatError, Result};
pub use tensor::Tensor;
