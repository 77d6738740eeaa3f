//! Mask- and text-conditioned diffusion transformer with a mixture of global
//! and local experts over decoupled semantic masks.

pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod codec;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod dit;
pub mod error;
pub mod gates;
pub mod imageio;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod mogle;
pub mod nn;
pub mod numerics;

pub use error::{Error, Result};
