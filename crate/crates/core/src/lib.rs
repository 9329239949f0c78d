//! Contrastive-loss training and benchmark evaluation for single-image
//! super-resolution.

pub mod checkpoint;
pub mod datapipe;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod optim;
pub mod rng;
pub mod sampling;
pub mod spectral;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::RandomSource;
pub use tensor::{BatchTensor, Image};
