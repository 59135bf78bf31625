//! The Gaussian map: anisotropic 3D Gaussians with per-parameter optimizer
//! state, spawn/prune bookkeeping and flat-table serialization.

mod gaussian;
mod io;
mod store;

pub use gaussian::{covariance, initialize_gaussian, Gaussian, InitScaleMode};
pub use io::{load_field, save_field};
pub use store::{FieldGradients, FieldLearningRates, GaussianField};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("gradient buffers sized for {got} Gaussians, field holds {expected}")]
    GradientSizeMismatch { expected: usize, got: usize },
    #[error("field file corrupt: {0}")]
    Corrupt(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
